"""Exception types shared across the package."""


class RBDMError(Exception):
    """Base class for all package errors."""


class ShapeError(RBDMError, ValueError):
    """Operands have incompatible dimensions."""


class NumericsError(RBDMError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(RBDMError, ValueError):
    """Invalid configuration or argument value."""


class DataError(RBDMError):
    """Missing, malformed or out-of-range data."""


class FormatError(DataError, ValueError):
    """A binary file does not follow the MPT1 / checkpoint layout."""


class NumericsWarning(RuntimeWarning):
    """Recoverable numerical problem (e.g. a clamped negative variance)."""
