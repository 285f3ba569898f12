"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ShapeError / NumericError -> 4.
"""


class CrFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(CrFusionError):
    """Operands have incompatible dimensions."""


class NumericError(CrFusionError):
    """A numeric contract was violated (NaN/Inf, zero norm, ...)."""


class UsageError(CrFusionError):
    """An API was called in an unsupported way."""


class DataError(CrFusionError):
    """Input data is malformed, inconsistent, or unresolvable."""


class ConfigError(CrFusionError):
    """A run configuration failed validation."""
