"""Exception hierarchy shared by all modules."""


class TfelabError(Exception):
    """Base class for all errors raised by tfelab."""


class DomainError(TfelabError, ValueError):
    """Argument outside the admissible domain (e.g. U0 <= 0, |x| > ell)."""


class ConfigurationError(TfelabError, ValueError):
    """Inconsistent discretization or run configuration."""


class RangeError(TfelabError, IndexError):
    """Index (norm order, derivative order) outside the tabulated range."""


class ShootingError(TfelabError, RuntimeError):
    """The ODE integrator failed; carries the last accepted state."""

    def __init__(self, message, x=None, state=None):
        super().__init__(message)
        self.x = x
        self.state = state


class BracketError(TfelabError, ValueError):
    """The q bracket does not enclose a sign change of the shooting residual."""


class AccuracyError(TfelabError, RuntimeError):
    """A certified residual could not be reached at the requested resolution."""


class AssemblyError(TfelabError, RuntimeError):
    """Assembled forms violate definiteness (quadrature too coarse)."""


class NumericalError(TfelabError, RuntimeError):
    """Linear-algebra failure (eigen-solver, singular system)."""


class StateError(TfelabError, RuntimeError):
    """The Lagrangian map lost monotonicity: 1 + V' fell below the margin."""

    def __init__(self, message, margin=None, s=None):
        super().__init__(message)
        self.margin = margin
        self.s = s


class PreconditionError(TfelabError, ValueError):
    """A probe was called outside the hypotheses of the inequality it measures."""
