"""Exception types shared across the package."""


class SkeleVisionError(Exception):
    """Base class for all package errors."""


class ConfigError(SkeleVisionError, ValueError):
    """Invalid configuration value (non-positive sizes, negative weights, ...)."""


class ShapeError(SkeleVisionError, ValueError):
    """Tensor/array shape does not match the documented contract."""


class DataError(SkeleVisionError, ValueError):
    """Malformed annotation files or dataset layout."""


class NumericsError(SkeleVisionError, RuntimeError):
    """NaN/Inf encountered where the pipeline requires finite values."""
