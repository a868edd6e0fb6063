"""Exception hierarchy shared by all modules."""


class DiscrnError(Exception):
    """Base class for library errors."""


class InvalidEdge(DiscrnError, ValueError):
    pass


class DisconnectedGraph(DiscrnError, ValueError):
    pass


class InfeasibleEdgeCount(DiscrnError, ValueError):
    pass


class InvalidConstants(DiscrnError, ValueError):
    pass


class NumericalError(DiscrnError, ArithmeticError):
    """Raised when an iteration produces non-finite or runaway values."""


class NonFiniteGradient(NumericalError):
    pass


class MaxItersExceeded(NumericalError):
    """The inner stopping criterion was not met within the iteration budget.

    ``p`` holds the last iterate and ``step_norms`` the last per-agent step
    magnitudes so callers can inspect how close the solve came.
    """

    def __init__(self, message, p=None, step_norms=None, sample=None):
        super().__init__(message)
        self.p = p
        self.step_norms = step_norms
        self.sample = sample


class BisectionBracketFailure(NumericalError):
    pass


class SubsolverDiverged(NumericalError):
    pass


class Condition1Failure(NumericalError):
    pass


class PlateauUndetected(DiscrnError):
    pass


class ConfigError(DiscrnError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
