"""Exception types shared across the package."""


class ElevEmbedError(Exception):
    """Base class for all package errors."""


class ParseError(ElevEmbedError):
    """Malformed text input (raster header, CSV, GeoJSON)."""


class DimensionError(ElevEmbedError):
    """Array or grid shapes do not line up."""


class ConfigError(ElevEmbedError):
    """Invalid configuration value or combination."""


class ValidationError(ElevEmbedError):
    """Input data violates a documented invariant."""


class FormatError(ElevEmbedError):
    """Binary file is corrupt, truncated, or of an unsupported version."""


class StateError(ElevEmbedError):
    """Operation called out of order (e.g. backward without a cached forward)."""


class DegenerateInputError(ElevEmbedError):
    """Numerically degenerate input (zero-norm vector, constant target, ...)."""
