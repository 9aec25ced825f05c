"""Exception taxonomy. Every failure raised by this package derives from FsdError."""


class FsdError(Exception):
    """Base class for all fsdetect errors."""


class ConfigurationError(FsdError):
    """A config object is internally inconsistent (bad shapes, bad hyperparameters)."""


class InputError(FsdError):
    """Runtime data handed to an operation violates its preconditions."""


class IngestionError(FsdError):
    """A dataset or registry file could not be read into memory."""


class SamplingError(FsdError):
    """An episode or evaluation draw cannot be satisfied by the dataset."""


class TrainingError(FsdError):
    """The optimizer hit a non-recoverable state (non-finite loss or gradient)."""


class MetricError(FsdError):
    """A metric was asked to summarize degenerate inputs."""


class StateError(FsdError):
    """An object is in a state that does not support the requested operation."""


class CheckpointError(FsdError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class UsageError(FsdError):
    """Bad command line invocation."""
