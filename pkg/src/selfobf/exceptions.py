"""Exception hierarchy shared by every stage of the pipeline."""


class SelfObfError(Exception):
    """Base class for all package errors."""


class DimensionError(SelfObfError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ImageIOError(SelfObfError, OSError):
    """An image or tensor file could not be read or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class ConfigError(SelfObfError, ValueError):
    """Invalid experiment, poisoning or training configuration."""


class DegenerateTriggerError(ConfigError):
    """A trigger would perturb zero pixels; raise the bounds or the density."""


class TrainingDivergedError(SelfObfError, FloatingPointError):
    """The training loss or a parameter became non-finite."""

    def __init__(self, epoch, detail="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


class StageError(SelfObfError, RuntimeError):
    """A pipeline stage failed while running an experiment."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
