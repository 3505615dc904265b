"""Exception types raised across the package."""


class AbLabError(Exception):
    """Base class for all package errors."""


class ShapeError(AbLabError, ValueError):
    pass


class NumericError(AbLabError, ArithmeticError):
    pass


class DegenerateMatrixError(NumericError):
    """Raised when a matrix has no nonzero singular value."""


class NotDecomposableError(AbLabError, ValueError):
    pass


class ConfigError(AbLabError, ValueError):
    pass


class ProtocolError(AbLabError, RuntimeError):
    """Collective participants disagree on tensor shapes."""


class InvariantViolation(AbLabError, AssertionError):
    pass


class IdxFormatError(AbLabError, ValueError):
    pass
