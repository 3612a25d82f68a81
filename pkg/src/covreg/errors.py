"""Exception hierarchy shared across the package."""


class CovRegError(Exception):
    """Base class for covariance-regression errors."""


class DimensionError(CovRegError, ValueError):
    """Array shapes do not agree."""


class ModelInvariantError(CovRegError):
    """A model quantity that must be positive definite failed its Cholesky factorization."""


class RankDeficiencyError(CovRegError):
    """A design (or augmented design) matrix is not of full column rank."""


class StudyError(CovRegError):
    """A simulation study could not produce a valid report."""
