"""Exception hierarchy shared by all deepvol modules."""


class DeepVolError(Exception):
    """Base class for all package errors."""


class InputError(DeepVolError, ValueError):
    """Invalid user-supplied input (bad shapes, non-finite values, bad files)."""


class NumericalError(DeepVolError, ArithmeticError):
    """A numerical routine failed in a way that signals pathological input."""


class ConvergenceError(DeepVolError):
    """An iterative routine hit its iteration cap."""


class PriceOutOfBounds(InputError):
    pass


class NoConvergence(ConvergenceError):
    pass


class QuadratureNotConverged(NumericalError):
    pass


class CovarianceNotPD(NumericalError):
    pass


class DegenerateSample(NumericalError):
    pass


class RejectionStall(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class FormatError(InputError):
    pass


class UnsupportedVersion(FormatError):
    pass


class SingularSystem(NumericalError):
    pass


class NonFiniteResidual(NumericalError):
    pass


class MaxIterations(ConvergenceError):
    """Raised only when the caller asks for strict convergence."""


class AllWalkersStuck(NumericalError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class EmptyAfterFilter(InputError):
    pass
