"""Exception types shared across the package."""


class OffrecError(Exception):
    """Base class for all package errors."""


class DimensionError(OffrecError, ValueError):
    """Tensor shapes do not conform."""


class UsageError(OffrecError, RuntimeError):
    """An API was called in a state where it cannot run."""


class NumericError(OffrecError, FloatingPointError):
    """A loss or value became NaN/Inf."""


class ConfigError(OffrecError, ValueError):
    """A configuration value is out of range or missing."""


class DataError(OffrecError, ValueError):
    """Input data cannot be interpreted."""
