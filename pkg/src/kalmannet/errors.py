"""Exception hierarchy shared across the package."""


class KalmanNetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(KalmanNetError, ValueError):
    """Argument with the wrong shape, range or type."""


class NumericalError(KalmanNetError, ArithmeticError):
    """A computation produced a non-finite, singular or degenerate result."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DivergenceError(NumericalError):
    """The filter state left the finite region."""


class MalformedFileError(KalmanNetError):
    """A dataset or checkpoint file could not be parsed."""


class DimensionError(MalformedFileError):
    """A file parsed cleanly but its declared dimensions are inconsistent."""
