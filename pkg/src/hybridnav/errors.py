"""Exception hierarchy shared by all hybridnav modules."""


class HybridNavError(Exception):
    """Base class for every error raised by this package."""


class DomainError(HybridNavError, ValueError):
    """An argument lies outside the domain of the operation."""


class InsufficientGeometryError(HybridNavError):
    """Too few anchors to solve for a position."""


class DegenerateGeometryError(HybridNavError):
    """Anchor geometry makes the normal equations rank deficient."""


class NoConvergenceError(HybridNavError):
    """The iterative solver hit its iteration limit.

    The best iterate found so far is kept on ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class InsufficientDataError(HybridNavError):
    """Too few readings inside an aggregation window."""


class DegenerateFitError(HybridNavError):
    """Calibration data cannot determine the model parameters."""


class OutOfRangeError(HybridNavError):
    """Inverting a model would extrapolate beyond its calibrated range."""


class InconsistentMeasurementError(HybridNavError):
    """Measurements combine into a physically impossible estimate."""


class ScenarioValidationError(HybridNavError):
    """A scenario failed validation; ``violations`` lists every problem."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.violations))
