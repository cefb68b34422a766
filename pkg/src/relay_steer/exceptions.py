"""Exception hierarchy shared across the package."""


class RelaySteerError(Exception):
    """Base class for all errors raised by relay_steer."""


class InvalidInputError(RelaySteerError, ValueError):
    """Input is malformed: non-finite entries, bad values, wrong types."""


class ShapeError(InvalidInputError):
    """Array dimensions are inconsistent."""


class HypothesisError(RelaySteerError):
    """A structural hypothesis of the control problem is violated.

    ``hypothesis`` names the failed condition ("i", "ii", "iii", or a
    Kalman label such as "rank").
    """

    def __init__(self, message, hypothesis=None):
        super().__init__(message)
        self.hypothesis = hypothesis


class NumericalError(RelaySteerError):
    """A computation failed for numerical reasons."""


class DivergenceError(NumericalError):
    """State norm exceeded the overflow guard during integration."""


class RankDeficiencyError(NumericalError):
    """A matrix that must be invertible is (numerically) singular."""


class TailBoundError(NumericalError):
    """Series truncation order is too small for the requested accuracy."""


class UnsupportedConfigurationError(RelaySteerError):
    """The requested combination of options is not implemented."""
