"""Exception types shared across the package."""


class AcdaError(Exception):
    """Base class for all package-specific errors."""


class GraphError(AcdaError):
    """Raised for malformed computation graphs: shape mismatches at build
    time, references to nodes that do not exist, cycles, or evaluation of
    a graph whose required leaves were not fed."""


class CheckpointError(AcdaError):
    """Raised when serialized parameters cannot be read back: bad magic,
    unsupported version, truncated payload, or architecture mismatch."""


class ConfigError(AcdaError):
    """Raised for invalid experiment configuration: unknown keys, values
    out of range, or a dataset block that does not describe a loadable
    dataset."""


class DataError(AcdaError):
    """Raised by dataset loaders for unreadable or malformed input files."""


class TransportError(AcdaError):
    """Raised when an exact transport problem is infeasible."""


class CapacityError(AcdaError):
    """Raised when a request exceeds a documented size bound (exact-solver
    instance size, query count larger than the pool, ...)."""


class TrainingDivergedError(AcdaError):
    """Raised when a training objective becomes non-finite.

    Carries the epoch index at which divergence was detected."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
