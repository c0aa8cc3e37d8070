"""Exception hierarchy shared by every module of the package."""


class ReluConfError(Exception):
    """Base class for all errors raised by reluconf."""


class DimensionError(ReluConfError, ValueError):
    """Operand shapes do not compose."""


class ValidationError(ReluConfError, ValueError):
    """An argument is outside its documented domain."""


class TapeStateError(ReluConfError, RuntimeError):
    """A tape was used out of order (backward before forward, or twice)."""


class NonFiniteError(ReluConfError, FloatingPointError):
    """An operation produced NaN or Inf."""


class UnsupportedArchitectureError(ReluConfError, TypeError):
    """The network contains layers the requested analysis cannot handle."""


class StabilizationError(ReluConfError, RuntimeError):
    """A ray did not settle into a single linear region within the budget."""


class TrainingError(ReluConfError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(ReluConfError, ValueError):
    """A file does not follow the expected binary layout."""


class CheckpointVersionError(FormatError):
    pass


class CheckpointHeaderError(FormatError):
    pass


class CheckpointLengthError(FormatError):
    pass


class TruncatedFileError(ReluConfError, OSError):
    """A file ended before its declared payload."""
