"""Exception hierarchy shared by all etds modules."""


class EtdsError(Exception):
    """Base class for every error raised by etds."""


class ConstructionError(EtdsError, ValueError):
    """Inconsistent dimensions or invalid values when building a model object."""


class InfeasibleTopology(EtdsError):
    """The pinned control-layer matrix H_c is not positive definite."""


class NumericalFault(EtdsError):
    """A computation produced non-finite values."""


class ModelError(EtdsError):
    """A nonlinearity violated its declared quadratic cone bound."""


class NotStable(EtdsError):
    """A matrix expected to be Hurwitz is not."""


class NotStabilizable(EtdsError):
    """No stabilizing initial gain could be found for the Riccati iteration."""


class ConvergenceFailure(EtdsError):
    """The Kleinman-Newton iteration stagnated or hit its iteration cap."""


class InvalidWeights(EtdsError, ValueError):
    """Design weights are not symmetric positive definite."""


class InvalidSigma(EtdsError, ValueError):
    """The trigger decay rate sigma is not below the design rate rho_v."""


class InvalidWindow(EtdsError, ValueError):
    """A time window [tau, t] with t < tau was requested."""


class InvalidStep(EtdsError, ValueError):
    """The integration step is incompatible with t_dos or the Zeno bound."""


class Diverged(EtdsError):
    """The simulated state became non-finite."""


class BoundUnavailable(EtdsError):
    """The inter-event lower bound is undefined (rank-deficient gain)."""


class ScenarioError(EtdsError):
    """Base class for scenario file problems (CLI exit code 2)."""


class ParseError(ScenarioError):
    """The scenario file is not a well-formed document."""


class ValidationError(ScenarioError, ValueError):
    """The scenario document violates a schema rule or a model invariant."""

    def __init__(self, field, message, line=None):
        self.field = field
        self.line = line
        where = field if line is None else f"{field} (line {line})"
        super().__init__(f"{where}: {message}")
