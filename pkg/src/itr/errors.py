"""Exception types shared across the estimation pipeline."""


class InputError(ValueError):
    """Bad user input: malformed data files, invalid configuration."""


class EstimationError(RuntimeError):
    """Numerical failure inside an estimation routine."""


class SeparationError(EstimationError):
    """Logistic likelihood is unbounded (perfectly separated arms)."""


class RankDeficiencyError(EstimationError):
    """Design matrix is rank deficient / a bread matrix is singular."""


class DegenerateWindowError(EstimationError):
    """A kernel window contains no usable mass.

    ``points`` holds the query locations whose local denominator fell
    below the degeneracy floor.
    """

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class NonConvergenceError(EstimationError):
    """An iterative solver exhausted its iteration budget."""


class FlatCrossingError(EstimationError):
    """Contrast slope at a root is too close to zero for inference."""
