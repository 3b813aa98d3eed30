"""Exception hierarchy shared by every module of the package."""


class SpsAoiError(Exception):
    """Base class for all errors raised by spsaoi."""


class DomainError(SpsAoiError, ValueError):
    """An argument lies outside the documented domain of a function."""


class AccuracyError(SpsAoiError, ArithmeticError):
    """A series or iteration failed to reach its accuracy target."""


class ConfigError(SpsAoiError, ValueError):
    """A configuration object violates its invariants."""


class FeasibilityError(DomainError):
    """A decision violates one of the optimization constraints.

    ``bound`` names the violated constraint (e.g. ``"speed_bounds"``).
    """

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class InfeasibleSpaceError(FeasibilityError):
    """The feasible set of the optimization problem is empty."""


class DegenerateScenarioError(DomainError):
    """The scenario has too few sensed neighbours to model."""


class ResourceExhaustionError(SpsAoiError):
    """The resource pool is too small for the number of contenders."""


class DivergenceError(SpsAoiError, ArithmeticError):
    """An expected value diverges (probability at or above one)."""


class DegenerateChannelError(DomainError):
    """Channel correlation is so close to one that the model breaks down."""


class InvalidChannelError(DomainError):
    """Derived channel probabilities left the unit interval."""


class AbsorbingChainError(DomainError):
    """The two-state chain has an absorbing state."""


class EndpointError(SpsAoiError):
    """The language-model endpoint could not be reached."""


class TrainingDivergenceError(DivergenceError):
    """Losses or gradients became non-finite during training."""
