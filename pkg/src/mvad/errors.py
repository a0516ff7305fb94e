"""Exception hierarchy shared by every mvad module."""

from __future__ import annotations


class MvadError(Exception):
    """Base class for all mvad errors."""


class ShapeError(MvadError, ValueError):
    """Tensor extents do not satisfy an operation's shape rules."""


class GeometryError(ShapeError):
    """Window grid or convolution geometry is invalid (e.g. a does not divide h)."""


class IndexOutOfRangeError(MvadError, IndexError):
    """A gather/selection index falls outside the source extent."""


class NonFiniteError(MvadError, ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(MvadError, RuntimeError):
    """Misuse of the gradient tape (backward twice, non-scalar root, ...)."""


class GradCheckError(MvadError, AssertionError):
    """Finite-difference gradient check could not be evaluated."""


class ConfigError(MvadError, ValueError):
    """Run configuration or dataset spec failed validation."""


class InvalidSpecError(ConfigError):
    """A DatasetSpec is internally inconsistent."""


class DivergenceError(MvadError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, step: int | None = None, loss: float | None = None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class CompatibilityError(MvadError):
    """Checkpoint, dataset, or manifest does not match what the caller expects."""


class SerializationError(CompatibilityError):
    """An MVT1 payload is corrupt or truncated."""


class UndefinedMetricError(MvadError, ValueError):
    """A metric is undefined for the given ground truth (e.g. a single class)."""


class TimerResolutionError(MvadError, RuntimeError):
    """A benchmark measurement stayed below the timer's resolution."""
