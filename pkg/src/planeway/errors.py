"""Exception types shared across the planeway pipeline."""


class PlanewayError(Exception):
    """Base class for all planeway-specific failures."""


class DegenerateInput(PlanewayError):
    """Input geometry carries no usable shape (coincident or collinear points)."""


class EmptyCloud(PlanewayError):
    """Point cloud is empty or too small after preprocessing."""


class NoTraversablePlane(PlanewayError):
    """Extraction finished without a single traversable plane."""


class EmptyGrid(PlanewayError):
    """A plane produced a grid without any Safe cell."""


class OutOfDomain(PlanewayError):
    """Query time or position lies outside the object's domain."""


class Unreachable(PlanewayError):
    """No path exists between the requested start and goal."""


class NoPlaneNearStart(Unreachable):
    """Start point does not project onto any traversable plane."""


class NoPlaneNearGoal(Unreachable):
    """Goal point does not project onto any traversable plane."""


class InfeasibleInit(PlanewayError):
    """Optimizer initial state sits on an untraversable cell."""


class SingularSystem(PlanewayError):
    """Spline system cannot be solved (non-positive duration or singular matrix)."""


class NonFiniteValue(PlanewayError):
    """A cost or gradient evaluation produced NaN or infinity."""


class ParseError(PlanewayError):
    """Malformed input file; message carries file name and line number."""


class ConfigError(PlanewayError):
    """Run configuration is malformed or contains unknown keys."""
