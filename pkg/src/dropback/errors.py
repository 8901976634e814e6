"""Exception hierarchy."""


class DropbackError(Exception):
    pass


class DimensionError(DropbackError, ValueError):
    """Tensor shapes do not fit together."""


class InputError(DropbackError, ValueError):
    """Bad caller-supplied data (labels out of range, empty files...)."""


class ConfigError(DropbackError, ValueError):
    pass


class FormatError(DropbackError, ValueError):
    """A file on disk does not follow the expected layout."""


class StateError(DropbackError, RuntimeError):
    """An operation was called out of order, e.g. backward without forward."""


class DivergenceError(DropbackError, RuntimeError):
    def __init__(self, epoch: int, iteration: int, loss: float):
        self.epoch = epoch
        self.iteration = iteration
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, iteration {iteration}"
        )
