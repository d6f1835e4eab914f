"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """An architecture, strategy or experiment setting is invalid."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class DivergedError(RuntimeError):
    """Training produced non-finite values and was aborted.

    ``last_losses`` holds the most recent finite per-task main losses, or
    ``None`` if no step completed.
    """

    def __init__(self, message, last_losses=None):
        super().__init__(message)
        self.last_losses = last_losses


class IdxFormatError(ValueError):
    """An IDX file could not be parsed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
