"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and its
subclasses -> 3, anything else -> 4.
"""


class GeoauditError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GeoauditError):
    """Invalid configuration value or combination."""


class DataError(GeoauditError):
    """Malformed input data: bad CSV, schema mismatch, coverage gaps."""


class ModelFormatError(DataError):
    """Corrupt, truncated, or wrong-version model file, or a model whose
    stored statistics are unusable (e.g. zero-cover internal node)."""


class EngineBoundError(GeoauditError):
    """Requested exact enumeration beyond its feasibility bound."""
