"""Exception types shared across the package."""


class SinklabError(Exception):
    pass


class DimensionError(SinklabError, ValueError):
    """Sequence length, token dimension or matrix shape is invalid."""


class NonFiniteError(SinklabError, FloatingPointError):
    """A NaN or infinity showed up in a computation.

    ``where`` names the offending location, e.g. ``"layer 0 head 1 position 5"``
    or a parameter path such as ``"layers[0][1].W_Q"``.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} ({where})")
        self.where = where


class ConfigError(SinklabError, ValueError):
    pass


class DivergenceError(SinklabError, RuntimeError):
    """Training produced a non-finite loss; carries the last good snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
