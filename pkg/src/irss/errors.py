"""Exception hierarchy shared by every module."""


class IRSSError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IRSSError, ValueError):
    """Tensor dimensions do not line up."""


class ContractError(IRSSError, ValueError):
    """An operation was called outside of its documented contract."""


class PreconditionError(IRSSError, RuntimeError):
    """Required state (gradients, labels, ...) is missing."""


class ConfigError(IRSSError, ValueError):
    """Invalid configuration value.

    ``path`` holds the dotted location of the offending field when known.
    """

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path
        self.message = message


class TrainingError(IRSSError, RuntimeError):
    """A loss term failed during training; carries the iteration index."""

    def __init__(self, message, iter_index):
        super().__init__(f"iter {iter_index}: {message}")
        self.iter_index = iter_index
