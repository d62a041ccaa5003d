"""Exception hierarchy shared by every subpackage."""


class LalqrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LalqrError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(LalqrError, ValueError):
    """A NaN or infinite value reached a place that only admits finite reals."""


class ConvergenceError(LalqrError):
    """An iterative method hit its iteration cap.

    Attributes:
        best_residual: smallest residual reached before giving up.
    """

    def __init__(self, message, best_residual=float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class DefinitenessError(LalqrError, ValueError):
    """A matrix required to be positive definite is not."""


class StabilizabilityError(LalqrError):
    """The Riccati recursion diverged or did not settle."""


class EvaluationError(LalqrError):
    """A function probed during gradient checking returned a non-finite value."""


class EquilibriumError(LalqrError, ValueError):
    """A point supplied as an equilibrium is not one."""


class PlannerError(LalqrError):
    """The trajectory optimizer could not produce a usable plan.

    Attributes:
        best_plan: the best plan found before the failure, if any.
    """

    def __init__(self, message, best_plan=None):
        super().__init__(message)
        self.best_plan = best_plan


class SynthesisError(LalqrError):
    """Gain synthesis failed.

    Attributes:
        system: the offending latent model.
        result: the training result (without a controller) when the failure
            happened at the end of training.
    """

    def __init__(self, message, system=None, result=None):
        super().__init__(message)
        self.system = system
        self.result = result


class TrainingError(LalqrError):
    """Training ended without meeting its target loss."""

    def __init__(self, message, final_loss=float("nan"), result=None):
        super().__init__(message)
        self.final_loss = final_loss
        self.result = result


class DiagnosticError(LalqrError, ValueError):
    """The eigen diagnostic was requested at an invalid operating point."""


class StageError(LalqrError):
    """An experiment stage failed; ``stage`` names it for the CLI exit message."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
