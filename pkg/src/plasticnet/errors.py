"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor or layer shapes do not line up."""


class InputError(ValueError):
    """An argument violates a documented precondition."""


class StateError(RuntimeError):
    """An object is used in a state it is not in (e.g. missing gradients)."""


class PlanError(ValueError):
    """A modification plan is inconsistent with the network it targets."""


class ConfigError(ValueError):
    """A configuration file or override is malformed or names unknown keys."""


class FormatError(ValueError):
    """A binary input file is malformed; message carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingAbort(RuntimeError):
    """Training hit a non-recoverable numeric failure (NaN loss)."""

    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index})")
        self.epoch = epoch
        self.batch_index = batch_index
