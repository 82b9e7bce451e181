"""Exception hierarchy shared by every module of the package."""


class ColokeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ColokeError, ValueError):
    """Operand shapes do not agree."""


class ConvergenceError(ColokeError, RuntimeError):
    """An iterative method hit its iteration cap."""


class NonFiniteError(ColokeError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message, node_id=None, state=None):
        super().__init__(message)
        self.node_id = node_id
        self.state = state


class SingularUpdateError(ColokeError, ArithmeticError):
    """A rank-one or least-squares update is numerically singular."""


class NotWarmError(ColokeError, ValueError):
    """A buffer does not yet hold enough states for the requested quantity."""


class DataFormatError(ColokeError, ValueError):
    """Malformed trajectory file or configuration."""

    def __init__(self, message, row=None, field=None):
        super().__init__(message)
        self.row = row
        self.field = field
