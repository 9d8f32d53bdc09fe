"""Exception hierarchy shared by the estimation, sampling, and inference code."""


class NceError(Exception):
    """Base class for every failure raised by this package."""


class DomainError(NceError):
    """A convex generator was evaluated outside its domain (0, inf)."""


class NotPositiveDefinite(NceError):
    """A Cholesky pivot fell at or below the positive-definiteness floor."""


class OutOfSupport(NceError):
    """A point violates the support of the model or auxiliary density."""


class RejectionStall(NceError):
    """Rejection sampling accepted too few proposals to ever finish."""


class MleDiverged(NceError):
    """Newton iteration for an auxiliary MLE failed after all restarts."""


class NonFiniteObjective(NceError):
    """The contrastive objective overflowed even after log-ratio clamping."""


class NonFiniteGradient(NceError):
    """The estimating function produced NaN or infinite entries."""


class LineSearchFailed(NceError):
    """Backtracking could not find a decrease within the backtrack budget."""


class DidNotConverge(NceError):
    """Optimizer budget exhausted; usually reported via FitResult.converged."""


class SingularA(NceError):
    """The curvature block of the sandwich is numerically singular."""


class SingularH(NceError):
    """The optimal-variance curvature matrix is numerically singular."""


class SingularOmega(NceError):
    """The second-moment matrix of the model scores is numerically singular."""


class ConfigError(NceError):
    """A JSON configuration or experiment plan failed validation."""
