"""Exception hierarchy shared by all eigkoop modules."""


class EigkoopError(Exception):
    """Base class for library errors."""


class DimensionError(EigkoopError, ValueError):
    """Operand shapes are inconsistent."""


class IntegrationBlowup(EigkoopError, FloatingPointError):
    """A non-finite state was produced during time integration."""

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class IllConditioned(EigkoopError, ArithmeticError):
    """A least-squares system is too ill-conditioned for the requested path."""


class ExponentialOverflow(EigkoopError, OverflowError):
    """exp(lambda * t) overflows double precision over the data horizon."""


class UnsupportedOperation(EigkoopError, ValueError):
    """The operation is not defined for the given arguments."""


class BranchCutError(EigkoopError, ValueError):
    """A non-integer power would cross the principal branch cut."""


class InfeasibleProblem(EigkoopError):
    """The quadratic program has an empty feasible set."""


class ConfigError(EigkoopError, ValueError):
    """Run configuration failed validation."""


class NumericalFailure(EigkoopError, ArithmeticError):
    """An iterative computation failed repeatedly and was aborted."""
