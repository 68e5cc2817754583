"""Exception types shared across the package."""


class MsfemError(Exception):
    """Base class for all errors raised by msfemlab."""


class InvalidArgumentError(MsfemError, ValueError):
    pass


class OutOfDomainError(MsfemError, ValueError):
    pass


class DegenerateElementError(MsfemError, ValueError):
    pass


class NumericError(MsfemError, ArithmeticError):
    """Factorization detected a matrix that is not symmetric positive definite."""


class SolverFailure(MsfemError, RuntimeError):
    """An iterative solve did not reach its tolerance.

    The achieved relative residual is kept on ``residual``; ``element`` is set
    when the failure happened inside a per-element local problem.
    """

    def __init__(self, message, residual=None, element=None):
        super().__init__(message)
        self.residual = residual
        self.element = element


class ResolutionWarning(UserWarning):
    """Fine mesh too coarse to resolve the coefficient oscillations."""
