"""Exception types shared across the package."""


class TimotionError(Exception):
    """Base class for all package errors."""


class DimensionError(TimotionError, ValueError):
    """Operand shapes do not conform."""


class UsageError(TimotionError, ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(TimotionError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigurationError(TimotionError, ValueError):
    """A skeleton or model configuration is inconsistent."""


class FormatError(TimotionError, IOError):
    """A dataset or checkpoint file is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
