"""Exception types shared across the simulator."""


class FLSimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FLSimError, ValueError):
    """Invalid sizes, mismatched lengths, unknown keys and similar user errors."""


class NumericalError(FLSimError, ArithmeticError):
    """A NaN or Inf showed up where a finite value is required."""


class FormatError(FLSimError):
    """A binary or text file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
