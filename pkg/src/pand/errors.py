"""Exception types raised across the package."""


class PandError(Exception):
    """Base class for all package errors."""


class ConfigError(PandError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(PandError, ValueError):
    """Tensor dimensions do not line up."""


class NumericError(PandError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class FormatError(PandError, ValueError):
    """A binary artifact (anchors, checkpoint, dataset) is malformed."""


class IngestionError(PandError, OSError):
    """A dataset on disk could not be loaded."""


class FreezeViolation(PandError, RuntimeError):
    """Frozen weights changed during a stage that must not touch them."""


class EvaluationError(PandError, ValueError):
    """Evaluation requested on unusable input (e.g. an empty split)."""
