"""Exception types shared across the package."""


class VolconError(Exception):
    """Base class for all package errors."""


class ContractError(VolconError, ValueError):
    """A precondition or shape contract was violated by the caller."""


class FormatError(VolconError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class RangeError(FormatError):
    """A stored value lies outside its permitted range."""


class PersistenceError(VolconError, OSError):
    """Reading or writing a file failed at the OS level."""


class NumericError(VolconError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
