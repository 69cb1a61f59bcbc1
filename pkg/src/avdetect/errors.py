"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""


class DataError(ValueError):
    """Input data violates its documented invariants."""


class FormatError(DataError):
    """A binary or text file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricError(ValueError):
    """A metric is undefined for the supplied inputs."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UsageError(RuntimeError):
    """An API was called in a state where it cannot operate."""
