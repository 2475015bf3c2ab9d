"""Exception types shared across the package."""


class SnldsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SnldsError, ValueError):
    """Shapes or settings do not agree with the model configuration."""


class UsageError(SnldsError, ValueError):
    """A function was called with arguments outside its contract."""


class NumericError(SnldsError, FloatingPointError):
    """A computation produced or received non-finite values."""


class DivergenceError(NumericError):
    """Training objective became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
