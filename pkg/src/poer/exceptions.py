"""Exception hierarchy shared by every poer module."""


class PoerError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgumentError(PoerError, ValueError):
    """An argument has the wrong shape, range or value."""


class DegenerateBatchError(PoerError):
    """No anchor in the batch has every relation group it needs."""


class ConfigurationError(PoerError, ValueError):
    """A configuration violates one of its invariants."""


class DivergenceError(PoerError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


class StateError(PoerError, RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class VersionMismatchError(PoerError):
    """A checkpoint was written by an incompatible format version."""
