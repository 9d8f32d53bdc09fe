"""Unnormalized target models and normalized auxiliary families.

Two concrete targets are provided, matching the experiments this package
reproduces:

* ``Gauss1D``: log p(x; alpha) = c - theta * x^2 on the real line;
* ``TruncPrecision3D``: log p(x; alpha) = c - 0.5 x' D x on the orthant
  {x in R^3 : x_i > 0.3}, with D a symmetric precision matrix parameterized
  by its six upper-triangle entries.

Both targets are linear in theta, so the score of the extended parameter
alpha = (c, theta) is (1, -grad_theta h(x)) with grad_theta h independent of
theta. Auxiliary families are proper densities with exact samplers, score
functions, and closed-form or Newton MLE. All densities are handled in log
form end to end; ratios between barely overlapping densities would overflow
anything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .errors import ConfigError, MleDiverged, OutOfSupport, RejectionStall
from .numerics import (
    RngState,
    cholesky_inverse,
    std_normal_cdf,
    std_normal_icdf,
    std_normal_logpdf,
    symmetrize,
)

TRUNCATION_LOWER_BOUND = 0.3


@dataclass(frozen=True)
class Alpha:
    """Extended parameter (c, theta) of an unnormalized model."""

    c: float
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))

    @property
    def dim(self) -> int:
        return 1 + self.theta.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.c], self.theta))

    @classmethod
    def from_vector(cls, vec) -> "Alpha":
        vec = np.asarray(vec, dtype=float)
        return cls(float(vec[0]), vec[1:].copy())


@dataclass(frozen=True)
class SampleSet:
    """Stratified data: m1 draws from the truth, m2 from the auxiliary."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_2d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "y", np.atleast_2d(np.asarray(self.y, dtype=float)))
        if self.x.shape[0] == 0 or self.y.shape[0] == 0:
            raise ValueError("both strata must be nonempty")
        if self.x.shape[1] != self.y.shape[1]:
            raise ValueError("strata dimensions differ")

    @property
    def m1(self) -> int:
        return self.x.shape[0]

    @property
    def m2(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.m1 + self.m2


def as_points(x, dim: int) -> np.ndarray:
    """Validate points as a (m, dim) float array; accepts (m,), (dim,), (m, dim)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr


# ---------------------------------------------------------------------------
# target models
# ---------------------------------------------------------------------------


class Gauss1D:
    """Unnormalized zero-mean Gaussian, log p = c - theta x^2."""

    kind = "gauss1d"
    point_dim = 1
    d_theta = 1
    component_names = ("c", "theta")

    def h(self, x, theta):
        x = as_points(x, self.point_dim)
        return float(np.asarray(theta).ravel()[0]) * x[:, 0] ** 2

    def grad_theta_h(self, x):
        x = as_points(x, self.point_dim)
        return x[:, :1] ** 2

    def log_p(self, x, alpha: Alpha):
        return alpha.c - self.h(x, alpha.theta)

    def in_support(self, x):
        x = as_points(x, self.point_dim)
        return np.isfinite(x[:, 0])

    def normalized_c(self, theta) -> float:
        """c making exp(c - theta x^2) integrate to one."""
        th = float(np.asarray(theta).ravel()[0])
        if th <= 0.0:
            raise ValueError("theta must be positive for a proper density")
        return 0.5 * np.log(th / np.pi)

    def sample_truth(self, true_alpha: Alpha, m1: int, rng: RngState):
        th = float(true_alpha.theta[0])
        if th <= 0.0:
            raise ValueError("truth must have positive theta")
        sigma = np.sqrt(1.0 / (2.0 * th))
        return (sigma * rng.standard_normal(m1)).reshape(-1, 1)

    def initial_alpha(self, x) -> Alpha:
        x = as_points(x, self.point_dim)
        v = float(np.var(x[:, 0]))
        return Alpha(0.0, np.array([1.0 / (2.0 * max(v, 1e-12))]))


# upper-triangle ordering of the free precision entries
_TRIU_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class TruncPrecision3D:
    """Truncated Gaussian with unknown precision, log p = c - 0.5 x'Dx on x_i > 0.3."""

    kind = "trunc_precision3d"
    point_dim = 3
    d_theta = 6
    component_names = ("c", "D11", "D22", "D33", "D12", "D13", "D23")

    @staticmethod
    def theta_to_matrix(theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != 6:
            raise ValueError("theta must hold the 6 free entries of a symmetric 3x3 matrix")
        d = np.empty((3, 3))
        for value, (i, j) in zip(theta, _TRIU_INDEX):
            d[i, j] = value
            d[j, i] = value
        return d

    @staticmethod
    def matrix_to_theta(d) -> np.ndarray:
        d = symmetrize(np.asarray(d, dtype=float))
        return np.array([d[i, j] for (i, j) in _TRIU_INDEX])

    def h(self, x, theta):
        x = as_points(x, self.point_dim)
        d = self.theta_to_matrix(theta)
        return 0.5 * np.einsum("ij,jk,ik->i", x, d, x)

    def grad_theta_h(self, x):
        x = as_points(x, self.point_dim)
        cols = [
            0.5 * x[:, 0] ** 2,
            0.5 * x[:, 1] ** 2,
            0.5 * x[:, 2] ** 2,
            x[:, 0] * x[:, 1],
            x[:, 0] * x[:, 2],
            x[:, 1] * x[:, 2],
        ]
        return np.column_stack(cols)

    def log_p(self, x, alpha: Alpha):
        x = as_points(x, self.point_dim)
        if not np.all(self.in_support(x)):
            raise OutOfSupport("point outside the truncated orthant")
        return alpha.c - self.h(x, alpha.theta)

    def in_support(self, x):
        x = as_points(x, self.point_dim)
        return np.all(x > TRUNCATION_LOWER_BOUND, axis=1)

    def normalized_c(self, theta) -> float:
        """c making the truncated density proper; uses a Gaussian orthant probability."""
        from scipy.stats import multivariate_normal

        d = self.theta_to_matrix(theta)
        cov = cholesky_inverse(d)
        # P(all X_i > b) = P(all X_i < -b) for a centered Gaussian
        orthant = float(
            multivariate_normal(mean=np.zeros(3), cov=cov).cdf(
                -TRUNCATION_LOWER_BOUND * np.ones(3)
            )
        )
        sign, logdet = np.linalg.slogdet(d)
        if sign <= 0:
            raise ValueError("precision matrix must be positive definite")
        log_z = 1.5 * np.log(2.0 * np.pi) - 0.5 * logdet + np.log(orthant)
        return -log_z

    def sample_truth(self, true_alpha: Alpha, m1: int, rng: RngState):
        """Rejection sampling: propose from the untruncated Gaussian, keep the orthant."""
        d = self.theta_to_matrix(true_alpha.theta)
        cov = cholesky_inverse(d)
        chol = np.linalg.cholesky(cov)
        accepted = []
        n_kept = 0
        proposals = 0
        batch = max(4 * m1, 8192)
        while n_kept < m1:
            z = rng.standard_normal((batch, 3)) @ chol.T
            keep = z[np.all(z > TRUNCATION_LOWER_BOUND, axis=1)]
            proposals += batch
            n_kept += keep.shape[0]
            accepted.append(keep)
            if proposals >= 100_000 and n_kept < 1e-4 * proposals:
                raise RejectionStall(
                    f"acceptance rate {n_kept / proposals:.2e} after {proposals} proposals"
                )
        return np.vstack(accepted)[:m1]

    def initial_alpha(self, x) -> Alpha:
        x = as_points(x, self.point_dim)
        cov = symmetrize(np.cov(x.T))
        d0 = symmetrize(np.linalg.inv(cov))
        return Alpha(0.0, self.matrix_to_theta(d0))


# ---------------------------------------------------------------------------
# auxiliary families
# ---------------------------------------------------------------------------


class GaussMeanVar1D:
    """Normal family N(mu, v) with beta = (mu, v)."""

    kind = "gauss_meanvar1d"
    point_dim = 1
    d_beta = 2

    def __init__(self, beta=None):
        self.beta = None if beta is None else self.validate_beta(beta)

    @staticmethod
    def validate_beta(beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.size != 2 or not np.all(np.isfinite(beta)) or beta[1] <= 0.0:
            raise ValueError("beta must be (mean, variance) with variance > 0")
        return beta

    def log_density(self, x, beta):
        mu, v = self.validate_beta(beta)
        x = as_points(x, self.point_dim)
        return -0.5 * np.log(2.0 * np.pi * v) - (x[:, 0] - mu) ** 2 / (2.0 * v)

    def in_support(self, x):
        x = as_points(x, self.point_dim)
        return np.isfinite(x[:, 0])

    def sample(self, beta, m2: int, rng: RngState):
        mu, v = self.validate_beta(beta)
        return (mu + np.sqrt(v) * rng.standard_normal(m2)).reshape(-1, 1)

    def grad_log_density(self, x, beta):
        mu, v = self.validate_beta(beta)
        x = as_points(x, self.point_dim)
        centered = x[:, 0] - mu
        return np.column_stack([centered / v, -0.5 / v + centered**2 / (2.0 * v * v)])

    def mle(self, y) -> np.ndarray:
        y = as_points(y, self.point_dim)
        if y.shape[0] < 2:
            raise ValueError("need at least two observations")
        mu = float(np.mean(y[:, 0]))
        v = float(np.mean((y[:, 0] - mu) ** 2))
        return np.array([mu, v])


def _trunc1d_mills(a):
    """phi(a) / (1 - Phi(a)), computed in log space for any a."""
    return np.exp(std_normal_logpdf(a) - log_ndtr(-a))


def _trunc1d_mean_loglik_and_grad(mu, v, n, s1, s2):
    """Per-observation log likelihood and gradient of a lower-truncated normal.

    The sample enters only through (n, sum y, sum y^2); truncation is from
    below at TRUNCATION_LOWER_BOUND.
    """
    sigma = np.sqrt(v)
    a = (TRUNCATION_LOWER_BOUND - mu) / sigma
    m2c = (s2 - 2.0 * mu * s1 + n * mu * mu) / n  # mean of (y - mu)^2
    mean_y = s1 / n
    loglik = -0.5 * np.log(2.0 * np.pi * v) - m2c / (2.0 * v) - log_ndtr(-a)
    lam = _trunc1d_mills(a)
    g_mu = (mean_y - mu) / v - lam / sigma
    g_v = -0.5 / v + m2c / (2.0 * v * v) - a * lam / (2.0 * v)
    return loglik, np.array([g_mu, g_v])


def _trunc1d_newton(start, n, s1, s2, max_iter=200, grad_tol=1e-9):
    """Damped Newton ascent on (mu, v); Hessian by differencing the gradient."""
    mu, v = float(start[0]), max(float(start[1]), 1e-8)
    loglik, grad = _trunc1d_mean_loglik_and_grad(mu, v, n, s1, s2)
    for _ in range(max_iter):
        if np.linalg.norm(grad) <= grad_tol:
            return np.array([mu, v]), True
        hess = np.empty((2, 2))
        for k, delta in enumerate((1e-6 * (1.0 + abs(mu)), 1e-6 * v)):
            bumped = [mu, v]
            bumped[k] += delta
            _, g_hi = _trunc1d_mean_loglik_and_grad(bumped[0], bumped[1], n, s1, s2)
            bumped[k] -= 2.0 * delta
            if bumped[1] <= 0.0:
                bumped[k] += delta
                g_lo = grad
                hess[:, k] = (g_hi - g_lo) / delta
                continue
            _, g_lo = _trunc1d_mean_loglik_and_grad(bumped[0], bumped[1], n, s1, s2)
            hess[:, k] = (g_hi - g_lo) / (2.0 * delta)
        hess = symmetrize(hess)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = grad
        if step @ grad <= 0.0:  # not an ascent direction, fall back to gradient
            step = grad
        scale = 1.0
        improved = False
        for _ in range(60):
            mu_new, v_new = mu + scale * step[0], v + scale * step[1]
            if v_new > 1e-10:
                ll_new, g_new = _trunc1d_mean_loglik_and_grad(mu_new, v_new, n, s1, s2)
                if np.isfinite(ll_new) and ll_new >= loglik - 1e-14:
                    mu, v, loglik, grad = mu_new, v_new, ll_new, g_new
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            return np.array([mu, v]), False
    return np.array([mu, v]), bool(np.linalg.norm(grad) <= grad_tol)


class TruncDiagNormal3D:
    """Product of three lower-truncated normals; beta = (mu1, v1, mu2, v2, mu3, v3)."""

    kind = "trunc_diag_normal3d"
    point_dim = 3
    d_beta = 6

    def __init__(self, beta=None):
        self.beta = None if beta is None else self.validate_beta(beta)

    @staticmethod
    def validate_beta(beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.size != 6 or not np.all(np.isfinite(beta)) or np.any(beta[1::2] <= 0.0):
            raise ValueError("beta must be (mu_i, v_i) triples with all v_i > 0")
        return beta

    def in_support(self, x):
        x = as_points(x, self.point_dim)
        return np.all(x > TRUNCATION_LOWER_BOUND, axis=1)

    def log_density(self, x, beta):
        beta = self.validate_beta(beta)
        x = as_points(x, self.point_dim)
        if not np.all(self.in_support(x)):
            raise OutOfSupport("point outside the truncated orthant")
        total = np.zeros(x.shape[0])
        for i in range(3):
            mu, v = beta[2 * i], beta[2 * i + 1]
            sigma = np.sqrt(v)
            a = (TRUNCATION_LOWER_BOUND - mu) / sigma
            total += (
                -0.5 * np.log(2.0 * np.pi * v)
                - (x[:, i] - mu) ** 2 / (2.0 * v)
                - log_ndtr(-a)
            )
        return total

    def sample(self, beta, m2: int, rng: RngState):
        """Inverse-CDF draws per coordinate on [Phi(a_i), 1)."""
        beta = self.validate_beta(beta)
        out = np.empty((m2, 3))
        for i in range(3):
            mu, v = beta[2 * i], beta[2 * i + 1]
            sigma = np.sqrt(v)
            lo = std_normal_cdf((TRUNCATION_LOWER_BOUND - mu) / sigma)
            u = rng.uniform(lo, 1.0, m2)
            out[:, i] = mu + sigma * std_normal_icdf(u)
        return out

    def grad_log_density(self, x, beta):
        beta = self.validate_beta(beta)
        x = as_points(x, self.point_dim)
        grads = np.empty((x.shape[0], 6))
        for i in range(3):
            mu, v = beta[2 * i], beta[2 * i + 1]
            sigma = np.sqrt(v)
            a = (TRUNCATION_LOWER_BOUND - mu) / sigma
            lam = _trunc1d_mills(a)
            centered = x[:, i] - mu
            grads[:, 2 * i] = centered / v - lam / sigma
            grads[:, 2 * i + 1] = -0.5 / v + centered**2 / (2.0 * v * v) - a * lam / (2.0 * v)
        return grads

    def mle(self, y) -> np.ndarray:
        """Per-coordinate Newton MLE with deterministic random restarts."""
        y = as_points(y, self.point_dim)
        if y.shape[0] < 2:
            raise ValueError("need at least two observations")
        beta_hat = np.empty(6)
        restart_rng = RngState(0xC0FFEE)
        for i in range(3):
            col = y[:, i]
            n, s1, s2 = col.size, float(col.sum()), float((col**2).sum())
            start = np.array([np.mean(col), max(np.var(col), 1e-6)])
            est, ok = _trunc1d_newton(start, n, s1, s2)
            attempts = 1
            while not ok and attempts <= 10:
                jitter = restart_rng.standard_normal(2)
                perturbed = np.array(
                    [start[0] + 0.5 * jitter[0], start[1] * np.exp(0.5 * jitter[1])]
                )
                est, ok = _trunc1d_newton(perturbed, n, s1, s2)
                attempts += 1
            if not ok:
                raise MleDiverged(f"truncated-normal MLE failed for coordinate {i}")
            beta_hat[2 * i : 2 * i + 2] = est
        return beta_hat


# ---------------------------------------------------------------------------
# operation surface
# ---------------------------------------------------------------------------


def log_density_ratio(model, aux, x, alpha: Alpha, beta) -> np.ndarray:
    """log p(x; alpha) - log n(x; beta) on the common support."""
    x = as_points(x, model.point_dim)
    ok = model.in_support(x) & aux.in_support(x)
    if not np.all(ok):
        raise OutOfSupport("point outside the common support")
    return model.log_p(x, alpha) - aux.log_density(x, beta)


def sample_truth(model, true_alpha: Alpha, m1: int, rng: RngState) -> np.ndarray:
    return model.sample_truth(true_alpha, m1, rng)


def sample_aux(aux, beta, m2: int, rng: RngState) -> np.ndarray:
    return aux.sample(beta, m2, rng)


def aux_mle(aux, y) -> np.ndarray:
    return aux.mle(y)


def grad_log_aux(aux, x, beta) -> np.ndarray:
    x = as_points(x, aux.point_dim)
    if not np.all(aux.in_support(x)):
        raise OutOfSupport("point outside the auxiliary support")
    return aux.grad_log_density(x, beta)


def draw_sample_set(model, true_alpha: Alpha, aux, beta, m1: int, m2: int, rng: RngState) -> SampleSet:
    """Stratified sample: m1 truth draws then m2 auxiliary draws from one stream."""
    x = sample_truth(model, true_alpha, m1, rng)
    y = sample_aux(aux, beta, m2, rng)
    return SampleSet(x=x, y=y)


# ---------------------------------------------------------------------------
# JSON configuration
# ---------------------------------------------------------------------------

MODEL_KINDS = {Gauss1D.kind: Gauss1D, TruncPrecision3D.kind: TruncPrecision3D}
AUX_KINDS = {GaussMeanVar1D.kind: GaussMeanVar1D, TruncDiagNormal3D.kind: TruncDiagNormal3D}

# named auxiliary settings for the 1-D experiments: one overlaps the target
# closely, the other barely
AUX_PRESETS = {
    "close": {"kind": "gauss_meanvar1d", "beta": [0.2, 1.2]},
    "far": {"kind": "gauss_meanvar1d", "beta": [1.6, 1.2]},
}


def model_from_config(cfg: dict):
    """Build (model, true_alpha) from {"kind": ..., "true_alpha": [...]} JSON.

    For the truncated model, "true_theta" may be given instead; the offset c
    is then resolved numerically so the truth is a proper density.
    """
    try:
        cls = MODEL_KINDS[cfg["kind"]]
    except KeyError as exc:
        raise ConfigError(f"unknown or missing model kind in {cfg!r}") from exc
    model = cls()
    if "true_alpha" in cfg:
        vec = np.asarray(cfg["true_alpha"], dtype=float)
        if vec.size != 1 + model.d_theta:
            raise ConfigError(f"true_alpha must have {1 + model.d_theta} entries")
        true_alpha = Alpha.from_vector(vec)
    elif "true_theta" in cfg:
        theta = np.asarray(cfg["true_theta"], dtype=float)
        if theta.size != model.d_theta:
            raise ConfigError(f"true_theta must have {model.d_theta} entries")
        true_alpha = Alpha(model.normalized_c(theta), theta)
    else:
        raise ConfigError("model config needs 'true_alpha' or 'true_theta'")
    return model, true_alpha


def aux_from_config(cfg) -> tuple[object, np.ndarray]:
    """Build (aux, beta) from config JSON or a named preset string."""
    if isinstance(cfg, str):
        try:
            cfg = AUX_PRESETS[cfg.lower()]
        except KeyError as exc:
            raise ConfigError(f"unknown auxiliary preset {cfg!r}") from exc
    try:
        cls = AUX_KINDS[cfg["kind"]]
    except KeyError as exc:
        raise ConfigError(f"unknown or missing auxiliary kind in {cfg!r}") from exc
    try:
        beta = cls.validate_beta(cfg["beta"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad auxiliary parameters in {cfg!r}: {exc}") from exc
    return cls(beta), beta
