"""Exception hierarchy shared by all modules."""


class HeavySgdError(Exception):
    """Base class for library errors."""


class ParameterError(HeavySgdError, ValueError):
    """A parameter lies outside its admissible domain."""


class InsufficientDataError(HeavySgdError, ValueError):
    """Not enough (usable) samples for the requested estimate."""


class DegenerateSampleError(InsufficientDataError):
    """Samples carry no spread, e.g. all values identical."""


class EstimationError(HeavySgdError, RuntimeError):
    """A Monte-Carlo or statistical estimate could not be formed."""


class LogDomainError(EstimationError):
    """Non-positive values where a logarithm is required."""


class NonConvergenceError(HeavySgdError, RuntimeError):
    """An iterative solver exhausted its budget before reaching tolerance."""

    def __init__(self, message, achieved=None, iterations=None):
        super().__init__(message)
        self.achieved = achieved
        self.iterations = iterations


class DivergenceError(HeavySgdError, FloatingPointError):
    """An SGD iterate became non-finite.

    ``index`` is the first iteration t whose iterate x_t is not finite;
    ``replication`` is filled in by :func:`heavysgd.sgd_core.replicate`.
    """

    def __init__(self, index, replication=None):
        self.index = int(index)
        self.replication = replication
        where = f" (replication {replication})" if replication is not None else ""
        super().__init__(f"non-finite iterate at t={self.index}{where}")
