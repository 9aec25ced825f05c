"""Few-shot metric-learning detector for AI-generated images and class-structured vectors."""

from .embedding import (AvgPool, Conv2d, EmbeddingNetwork, Flatten, ForwardTrace,
                        FullyConnected, NetworkConfig, Relu, backward, forward,
                        image_network_config, init_network, load_checkpoint,
                        save_checkpoint, vector_network_config)
from .episodes import (ClassDataset, ClassRecord, Episode, ImagePreprocess,
                       SamplerConfig, SynthConfig, export_csv_dataset,
                       generate_synthetic, load_image_dataset, load_vector_dataset,
                       preprocess, sample_episode)
from .errors import (CheckpointError, ConfigurationError, FsdError, IngestionError,
                     InputError, MetricError, SamplingError, StateError,
                     TrainingError, UsageError)
from .evaluate import (CrossGenConfig, CrossGenResult, DetectionVerdict, EvalReport,
                       ShotSweepResult, accuracy, average_precision,
                       build_zero_shot_registry, cross_generator_run,
                       export_embeddings, fewshot_detect, shot_sweep,
                       zero_shot_detect)
from .optim import (AdamState, ScheduleConfig, TrainResult, TrainSinks, adam_step,
                    init_adam, lr_at_step, train)
from .protonet import (ClassProbabilities, Prototype, PrototypeRegistry, classify,
                       classify_batch, compute_prototype, episode_loss,
                       load_registry, probabilities_from_distances,
                       prototypical_loss, save_registry, sq_euclidean)

__version__ = "0.1.0"
