"""Exception types shared across the package."""


class ArcVQError(Exception):
    """Base class for all package errors."""


class ShapeError(ArcVQError, ValueError):
    """Operand dimensions are incompatible for the requested operation."""


class ContractError(ArcVQError, ValueError):
    """A precondition of an API call was violated."""


class ConfigError(ArcVQError, ValueError):
    """Invalid configuration value or combination."""


class CorruptStateError(ArcVQError, RuntimeError):
    """Mutable state holds values that should be impossible (NaN, inf)."""


class FormatError(ArcVQError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConsistencyError(ArcVQError, ValueError):
    """Two inputs that must agree (e.g. image and label files) do not."""


class TruncatedFileError(ArcVQError, OSError):
    """A file ended before its header said it would."""


class TrainingDiverged(ArcVQError, RuntimeError):
    """A loss term became non-finite during training."""
