"""Exception hierarchy shared by every saltlab module."""


class SaltError(Exception):
    """Base class for all saltlab errors."""


class DimensionError(SaltError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateBatchError(SaltError, ValueError):
    """Batch statistics cannot be estimated from fewer than two values."""


class LabelError(SaltError, ValueError):
    """A class label is outside the valid index range."""


class ContractError(SaltError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigurationError(SaltError, ValueError):
    """A model, split point, or experiment setting is invalid."""


class ConstructionError(ConfigurationError):
    """A layer specification cannot be instantiated for the given input shape."""


class ClosedModelViolation(SaltError, RuntimeError):
    """Frozen head or tail parameters changed during training."""


class ProtocolError(SaltError, ValueError):
    """A peer sent a message that violates the wire protocol."""


class FramingError(ProtocolError):
    """A byte buffer is truncated or otherwise cannot be delimited."""


class SessionError(SaltError, RuntimeError):
    """A split-learning session ended abnormally."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")
        self.batch_index = batch_index
