"""Exception types shared across the package."""


class AanseError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(AanseError, ValueError):
    pass


class SingularMatrix(AanseError, ArithmeticError):
    pass


class EmptyHistory(AanseError, ValueError):
    pass


class HypothesisViolated(AanseError, ValueError):
    """Raised when the inputs fall outside the region where a bound applies."""


class InsufficientTrace(AanseError, ValueError):
    pass


class OperatorFailure(AanseError, RuntimeError):
    """The fixed-point map could not be evaluated (typically a failed inner solve)."""


class LinearSolveFailure(OperatorFailure):
    pass


class EmptyTrace(AanseError, ValueError):
    pass


class IoFailure(AanseError, OSError):
    pass
