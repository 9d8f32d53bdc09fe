"""Small dense linear algebra, normal special functions, and seeded RNG.

Every matrix in this package is a plain float64 numpy array of side at most
seven, so the routines here favour explicit contracts (pivot floors, symmetry
tolerances) over throughput. Random draws come from a PCG64 stream wrapped in
:class:`RngState`; the same seed reproduces the same sequence bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr, ndtri

from .errors import NotPositiveDefinite

_MASK64 = (1 << 64) - 1

# A Cholesky pivot (squared diagonal of the factor) at or below this value is
# treated as loss of positive definiteness rather than rounded through.
CHOLESKY_PIVOT_MIN = 1e-12


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average a nearly symmetric matrix with its transpose."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def symmetry_defect(m: np.ndarray) -> float:
    """Largest relative asymmetry |M[i,j]-M[j,i]| / (1 + |M[i,j]|)."""
    m = np.asarray(m, dtype=float)
    return float(np.max(np.abs(m - m.T) / (1.0 + np.abs(m)))) if m.size else 0.0


def _require_square_symmetric(m: np.ndarray, tol: float) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if symmetry_defect(m) > tol:
        raise ValueError("matrix is not symmetric within tolerance")
    return symmetrize(m)


def cholesky_inverse(m: np.ndarray) -> np.ndarray:
    """Invert a symmetric positive-definite matrix via its Cholesky factor.

    Raises :class:`NotPositiveDefinite` when any pivot falls at or below
    ``CHOLESKY_PIVOT_MIN``, which is how singular sandwich blocks surface.
    """
    a = _require_square_symmetric(m, tol=1e-8)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky factorization failed: {exc}") from exc
    pivots = np.diag(lower) ** 2
    if np.any(pivots <= CHOLESKY_PIVOT_MIN):
        raise NotPositiveDefinite(
            f"Cholesky pivot {pivots.min():.3e} at or below {CHOLESKY_PIVOT_MIN:.0e}"
        )
    linv = solve_triangular(lower, np.eye(a.shape[0]), lower=True)
    return linv.T @ linv


def min_eigenvalue(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    a = _require_square_symmetric(m, tol=1e-8)
    if a.shape[0] == 0:
        raise ValueError("empty matrix has no eigenvalues")
    return float(np.linalg.eigvalsh(a)[0])


def std_normal_cdf(x):
    """Standard normal CDF, erfc-based, absolute error well under 1e-10.

    Accepts scalars or arrays and mirrors the input shape.
    """
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def std_normal_icdf(p):
    """Inverse standard normal CDF (quantile function)."""
    out = ndtri(np.asarray(p, dtype=float))
    return float(out) if np.isscalar(p) or np.ndim(p) == 0 else out


def std_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - 0.5 * np.log(2.0 * np.pi)


def simpson_weights(n_points: int, dx: float) -> np.ndarray:
    """Composite Simpson weights for an odd number of uniformly spaced points."""
    if n_points < 3 or n_points % 2 == 0:
        raise ValueError("composite Simpson needs an odd point count >= 3")
    w = np.ones(n_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (dx / 3.0)


def _draw_count(size) -> int:
    if size is None:
        return 1
    if np.isscalar(size):
        return int(size)
    return int(np.prod(size))


class RngState:
    """Deterministic random stream with an explicit seed and draw counter.

    The stream is a PCG64 generator; ``position`` counts scalar draws so tests
    can assert that two states sit at the same point of the sequence.
    Instances are never shared across workers; derive independent states from
    distinct seeds instead.
    """

    __slots__ = ("seed", "position", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.position = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngState(seed={self.seed}, position={self.position})"

    def standard_normal(self, size=None):
        self.position += _draw_count(size)
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.position += _draw_count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.position += _draw_count(size)
        return self._gen.integers(low, high, size)


def draw_std_normal(rng: RngState, size=None):
    """One (or ``size``) standard normal deviates from a seeded stream."""
    return rng.standard_normal(size)
