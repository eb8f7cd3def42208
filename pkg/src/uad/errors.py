"""Exception hierarchy shared across the pipeline."""


class UadError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(UadError, ValueError):
    """Input or configuration violates a documented invariant."""


class VolumeReadError(UadError, OSError):
    """A volumetric file could not be read or has an unusable payload."""


class NonFiniteError(ValidationError):
    """Array contains NaN or infinite values."""


class ShapeError(ValidationError):
    """Array shape does not match what the operation requires."""


class UnknownLabelError(ValidationError):
    """Mask holds label ids that are not named."""

    def __init__(self, ids):
        self.ids = sorted(int(i) for i in ids)
        super().__init__(f"mask contains unnamed label ids: {self.ids}")


class CheckpointError(UadError):
    """Checkpoint is unreadable or incompatible with the requested config."""


class TrainingError(UadError, RuntimeError):
    """Training diverged or could not start."""


class DependencyError(UadError):
    """A pipeline stage is missing an upstream artifact."""
