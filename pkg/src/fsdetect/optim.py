"""Adam, the step-decay learning-rate schedule, and the episodic training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingNetwork, save_checkpoint
from .episodes import ClassDataset, SamplerConfig, eligible_classes, sample_episode
from .errors import ConfigurationError, SamplingError, TrainingError
from .protonet import episode_loss

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(parameter_count: int, dtype=np.float32, **kwargs) -> AdamState:
    return AdamState(m=np.zeros(parameter_count, dtype=dtype),
                     v=np.zeros(parameter_count, dtype=dtype), **kwargs)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    gamma: float = 0.5
    step_size: int = 80_000
    total_steps: int = 200_000
    episodes_per_step: int = 16      # episode gradients averaged per optimizer step

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must be in (0, 1]")
        if self.step_size < 1 or self.total_steps < 0 or self.episodes_per_step < 1:
            raise ConfigurationError("step_size >= 1, total_steps >= 0, episodes_per_step >= 1")


def lr_at_step(cfg: ScheduleConfig, step: int) -> float:
    """base_lr * gamma^floor(step / step_size); piecewise constant, non-increasing."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    return float(cfg.base_lr * cfg.gamma ** (step // cfg.step_size))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns (new_params, new_state); inputs untouched."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise TrainingError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if lr <= 0:
        raise TrainingError("learning rate must be positive")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise TrainingError(f"non-finite gradient at index {int(bad[0])}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m=m, v=v, t=t, beta1=state.beta1, beta2=state.beta2,
                                 eps=state.eps)


@dataclass
class TrainSinks:
    """Where training artifacts go. All optional; useful runs set at least log_path."""

    log_path: Optional[Path] = None
    checkpoint_dir: Optional[Path] = None
    checkpoint_every: int = 1000
    log_every: int = 100


@dataclass
class TrainResult:
    network: EmbeddingNetwork
    losses: np.ndarray            # float64, one entry per optimizer step
    records: list                 # emitted log records (dicts)


def train(net: EmbeddingNetwork, ds: ClassDataset, sampler_cfg: SamplerConfig,
          schedule_cfg: ScheduleConfig, sinks: Optional[TrainSinks] = None) -> TrainResult:
    """Run the episodic loop: each optimizer step averages the loss/gradient of
    `episodes_per_step` freshly sampled episodes, then applies Adam at the
    scheduled rate. Fully deterministic for a fixed (dataset, configs) tuple.

    Aborts on non-finite loss/gradient, leaving the last good checkpoint behind.
    """
    eligible_classes(ds, sampler_cfg)   # warn once up front about short classes
    sinks = sinks or TrainSinks()
    rng = np.random.default_rng(sampler_cfg.seed)
    params = net.params.copy()
    state = init_adam(net.parameter_count, dtype=params.dtype)
    losses = np.zeros(schedule_cfg.total_steps, dtype=np.float64)
    records = []
    log_fh = None
    if sinks.log_path is not None:
        Path(sinks.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(sinks.log_path, "w", encoding="utf-8")

    def emit(record):
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    def save(tag, current):
        if sinks.checkpoint_dir is not None:
            save_checkpoint(EmbeddingNetwork(net.config, current),
                            Path(sinks.checkpoint_dir) / f"{tag}.ckpt")

    t0 = time.monotonic()
    current = EmbeddingNetwork(net.config, params)
    try:
        for step in range(schedule_cfg.total_steps):
            lr = lr_at_step(schedule_cfg, step)
            grad_sum = np.zeros(net.parameter_count, dtype=np.float64)
            loss_sum = 0.0
            for _ in range(schedule_cfg.episodes_per_step):
                episode = sample_episode(ds, sampler_cfg, rng)
                loss, grad = episode_loss(current, episode)
                loss_sum += loss
                grad_sum += grad
            mean_loss = loss_sum / schedule_cfg.episodes_per_step
            if not np.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss at step {step}")
            losses[step] = mean_loss
            mean_grad = (grad_sum / schedule_cfg.episodes_per_step).astype(params.dtype)
            params, state = adam_step(params, mean_grad, state, lr)
            current = EmbeddingNetwork(net.config, params)
            if step % sinks.log_every == 0 or step == schedule_cfg.total_steps - 1:
                emit({"step": step, "lr": lr, "loss": mean_loss,
                      "wallclock_ms": (time.monotonic() - t0) * 1e3})
            if (step + 1) % sinks.checkpoint_every == 0:
                save(f"step_{step + 1:08d}", params)
    except (TrainingError, SamplingError):
        save("abort", params)
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    save("final", params)
    return TrainResult(network=current, losses=losses, records=records)
