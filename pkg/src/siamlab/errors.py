"""Exception hierarchy shared by every siamlab module."""


class SiamLabError(Exception):
    """Base class for all errors raised by siamlab."""


class ConfigurationError(SiamLabError, ValueError):
    """A configuration value or combination of values is invalid."""


class InputError(SiamLabError, ValueError):
    """An operation received arguments that violate its preconditions."""


class DegenerateInputError(InputError):
    """A computation hit a degenerate value, e.g. a zero-norm feature row."""


class NumericalError(SiamLabError, ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message, *, where=None, step=None):
        super().__init__(message)
        self.where = where
        self.step = step


class IngestionError(SiamLabError, OSError):
    """A dataset file is missing or could not be parsed."""


class IntegrityError(SiamLabError):
    """Stored data failed a checksum, length, or compatibility check."""
