"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class AvdfError(Exception):
    """Base class for all package errors."""


class ConfigError(AvdfError):
    """Invalid or inconsistent configuration."""


class DataError(AvdfError):
    """Problem with input data (missing corpus, bad sample, ...)."""


class FormatError(DataError):
    """A file does not carry the expected magic/version."""


class CorruptionError(DataError):
    """A file carries the expected magic but its payload is inconsistent."""


class NumericError(AvdfError):
    """Numeric failure (NaN/Inf encountered where finite values are required)."""
