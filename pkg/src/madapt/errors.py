"""Exception types shared across the package."""


class MadaptError(Exception):
    """Base class for all package errors."""


class DimensionError(MadaptError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MadaptError, ValueError):
    """A precondition of an operation was violated."""


class ValidationError(MadaptError, ValueError):
    """A configuration or spec field is invalid."""


class NumericError(MadaptError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class FormatError(MadaptError, ValueError):
    """A persisted container is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
