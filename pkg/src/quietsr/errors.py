"""Exception hierarchy shared by every quietsr module."""


class QuietSRError(Exception):
    """Base class for all errors raised by quietsr."""


class ValidationError(QuietSRError, ValueError):
    """An argument has the wrong shape, range, or value."""


class StructuralError(QuietSRError, IndexError):
    """A qubit or tensor index points outside its container."""


class CapacityError(QuietSRError):
    """A request exceeds a fixed resource budget (qubits, dimensions)."""


class NumericalFailure(QuietSRError, ArithmeticError):
    """A computation produced non-finite values.

    ``where`` names the stage (layer index, step index) that failed.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class FormatError(QuietSRError, ValueError):
    """A file does not follow its binary layout."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset
