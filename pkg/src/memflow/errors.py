"""Exception hierarchy shared by all memflow modules."""


class MemflowError(Exception):
    """Base class for every error raised by memflow."""


class MalformedSegmentError(MemflowError, ValueError):
    pass


class GridMismatchError(MemflowError, ValueError):
    """Raised when a time or window is not a multiple of the grid step, or two
    objects live on different grids."""


class OutOfRangeError(MemflowError, IndexError):
    pass


class ShapeError(MemflowError, ValueError):
    pass


class NumericError(MemflowError, ArithmeticError):
    """Non-finite value produced by a coefficient or a diagnostic."""


class BlowUpError(NumericError):
    """A particle left the finite range during integration."""

    def __init__(self, message, particle=None, step=None):
        super().__init__(message)
        self.particle = particle
        self.step = step


class UnsupportedCouplingError(MemflowError, ValueError):
    pass


class DomainError(MemflowError, ValueError):
    pass


class ModelError(MemflowError, ValueError):
    """Unknown builtin model or parameters violating its constraints."""


class InsufficientIterationsError(MemflowError, ValueError):
    pass


class ConfigError(MemflowError, ValueError):
    """Run configuration failed schema validation."""
