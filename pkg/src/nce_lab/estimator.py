"""Contrastive objective, estimating equation, and the two fit pipelines.

The objective uses per-stratum averages,

    J(alpha) = -mean_x a(log r) + mean_y b(log r),      r = p(.; alpha) / n(.; beta),

with (a, b) the generator-specific terms from :mod:`nce_lab.divergence`. The
estimating equation is reported in the pooled normalization used by the
variance formulas,

    V(alpha) = (1/m) [ (m2/m) sum_x psi(r) s(x) - (m1/m) sum_y psi(r) r s(y) ],

where s(x) = (1, -grad_theta h(x)) is the score of the extended parameter.
The two normalizations differ by the constant factor m1 m2 / m^2, so
V = -(m1 m2 / m^2) grad J and both share their root.

``fit_nc`` minimizes J with the auxiliary parameters held fixed;
``fit_pl`` first replaces them with the auxiliary MLE fitted on the noise
stratum. A scikit-learn estimator wrapping both lives at the bottom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .divergence import Divergence, OptimalJS, parse_divergence
from .errors import LineSearchFailed, NonFiniteGradient, NonFiniteObjective
from .models import (
    Alpha,
    SampleSet,
    as_points,
    aux_from_config,
    aux_mle,
    sample_aux,
)
from .numerics import RngState

GRAD_TOL_REL = 1e-8
MAX_ITERATIONS = 500
MAX_BACKTRACKS = 60
ARMIJO_SLOPE = 1e-4


@dataclass(frozen=True)
class NceProblem:
    """One estimation problem: model + auxiliary + divergence + stratified data."""

    model: object
    aux: object
    beta: np.ndarray
    divergence: Divergence
    sample: SampleSet

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        if isinstance(self.divergence, OptimalJS):
            ratio = self.sample.m1 / self.sample.m2
            if abs(self.divergence.nu - ratio) > 1e-12 * max(ratio, 1.0):
                raise ValueError(
                    f"OptimalJS nu={self.divergence.nu} does not match m1/m2={ratio}"
                )

    def with_beta(self, beta) -> "NceProblem":
        return NceProblem(self.model, self.aux, beta, self.divergence, self.sample)


@dataclass
class FitResult:
    alpha_hat: Alpha
    objective_value: float
    gradient_norm: float
    iterations: int
    converged: bool


class _Workspace:
    """Per-problem precomputation; the model is linear in theta, so the score
    features and the auxiliary log density are fixed for the whole fit."""

    def __init__(self, prob: NceProblem):
        sample = prob.sample
        self.m1, self.m2 = sample.m1, sample.m2
        feats_x = prob.model.grad_theta_h(sample.x)
        feats_y = prob.model.grad_theta_h(sample.y)
        self.feats_x, self.feats_y = feats_x, feats_y
        self.log_n_x = prob.aux.log_density(sample.x, prob.beta)
        self.log_n_y = prob.aux.log_density(sample.y, prob.beta)
        self.score_x = np.column_stack([np.ones(self.m1), -feats_x])
        self.score_y = np.column_stack([np.ones(self.m2), -feats_y])
        self.divergence = prob.divergence

    def log_ratios(self, vec: np.ndarray):
        c, theta = vec[0], vec[1:]
        t_x = c - self.feats_x @ theta - self.log_n_x
        t_y = c - self.feats_y @ theta - self.log_n_y
        return t_x, t_y

    def objective(self, vec: np.ndarray) -> float:
        t_x, t_y = self.log_ratios(vec)
        with np.errstate(over="ignore"):
            a = self.divergence.loss_terms(t_x)[0]
            b = self.divergence.loss_terms(t_y)[1]
            value = float(-np.mean(a) + np.mean(b))
        if not np.isfinite(value):
            raise NonFiniteObjective(
                "objective overflowed after log-ratio clamping; the density "
                "ratio is astronomically large for this parameter value"
            )
        return value

    def gradient(self, vec: np.ndarray) -> np.ndarray:
        t_x, t_y = self.log_ratios(vec)
        with np.errstate(over="ignore", invalid="ignore"):
            psi_x, _ = self.divergence.weights(t_x)
            _, psi_r_y = self.divergence.weights(t_y)
            grad = -self.score_x.T @ psi_x / self.m1 + self.score_y.T @ psi_r_y / self.m2
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("estimating function produced non-finite entries")
        return grad

    def estimating_equation(self, vec: np.ndarray) -> np.ndarray:
        m = self.m1 + self.m2
        t_x, t_y = self.log_ratios(vec)
        with np.errstate(over="ignore", invalid="ignore"):
            psi_x, _ = self.divergence.weights(t_x)
            _, psi_r_y = self.divergence.weights(t_y)
            v = (
                (self.m2 / m) * (self.score_x.T @ psi_x)
                - (self.m1 / m) * (self.score_y.T @ psi_r_y)
            ) / m
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient("estimating function produced non-finite entries")
        return v


def objective(prob: NceProblem, alpha: Alpha) -> float:
    """Value of the contrastive objective at alpha (per-stratum averages)."""
    return _Workspace(prob).objective(alpha.as_vector())


def estimating_equation(prob: NceProblem, alpha: Alpha) -> np.ndarray:
    """Pooled-normalization estimating function; equals -(m1 m2 / m^2) grad J."""
    return _Workspace(prob).estimating_equation(alpha.as_vector())


def minimize_quasi_newton(
    fun,
    grad,
    x0,
    rel_tol: float = GRAD_TOL_REL,
    max_iter: int = MAX_ITERATIONS,
    max_backtracks: int = MAX_BACKTRACKS,
):
    """Dense BFGS with Armijo backtracking.

    Convergence when ||grad|| <= rel_tol * (1 + |f|). Trial points where the
    objective overflows are treated as +inf and backtracked through, which is
    what keeps the heavy-ratio configurations from crashing a sweep. Returns
    (x, f, grad_norm, iterations, converged).
    """

    def safe_fun(z):
        try:
            v = fun(z)
        except NonFiniteObjective:
            return np.inf
        return v if np.isfinite(v) else np.inf

    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)  # a non-finite start is a caller error, let it raise
    g = grad(x)
    n = x.size
    hinv = np.eye(n)
    best = (f, x.copy(), float(np.linalg.norm(g)))

    for iteration in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            gnorm = float(np.linalg.norm(g))
            if gnorm <= rel_tol * (1.0 + abs(f)):
                return x, f, gnorm, iteration, True
            direction = -hinv @ g
            slope = float(direction @ g)
            if not np.isfinite(slope) or slope >= 0.0:
                # secant model lost descent (or overflowed); restart steepest
                hinv = np.eye(n)
                direction = -g
                slope = -(gnorm**2)
        if not np.isfinite(slope):
            # the gradient itself is astronomically large; no usable direction
            raise LineSearchFailed(f"gradient magnitude overflowed at iteration {iteration}")
        step = 1.0
        for _ in range(max_backtracks + 1):
            x_new = x + step * direction
            f_new = safe_fun(x_new)
            if f_new <= f + ARMIJO_SLOPE * step * slope:
                break
            step *= 0.5
        else:
            raise LineSearchFailed(
                f"no decrease after {max_backtracks} backtracks at iteration {iteration}"
            )
        g_new = grad(x_new)
        s = x_new - x
        yvec = g_new - g
        sy = float(s @ yvec)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yvec):
            rho = 1.0 / sy
            outer = np.outer(s, yvec)
            hinv = (np.eye(n) - rho * outer) @ hinv @ (np.eye(n) - rho * outer.T)
            hinv += rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        if f < best[0]:
            best = (f, x.copy(), float(np.linalg.norm(g)))

    f_best, x_best, gnorm_best = best
    return x_best, f_best, gnorm_best, max_iter, False


def fit_nc(prob: NceProblem, init: Alpha | None = None) -> FitResult:
    """Minimize the objective with the auxiliary parameters held fixed."""
    ws = _Workspace(prob)
    if init is None:
        init = prob.model.initial_alpha(prob.sample.x)
    x, f, gnorm, iters, ok = minimize_quasi_newton(ws.objective, ws.gradient, init.as_vector())
    return FitResult(
        alpha_hat=Alpha.from_vector(x),
        objective_value=f,
        gradient_norm=gnorm,
        iterations=iters,
        converged=ok,
    )


def fit_pl(prob: NceProblem, init: Alpha | None = None):
    """Plug-in fit: replace beta with the auxiliary MLE from the noise stratum.

    Returns (FitResult, beta_hat).
    """
    beta_hat = aux_mle(prob.aux, prob.sample.y)
    result = fit_nc(prob.with_beta(beta_hat), init=init)
    return result, beta_hat


# ---------------------------------------------------------------------------
# scikit-learn front end
# ---------------------------------------------------------------------------


class NoiseContrastiveEstimator(BaseEstimator):
    """Scikit-learn style front end for noise contrastive density estimation.

    Parameters
    ----------
    model : object
        Unnormalized target model (e.g. ``Gauss1D()``); defines log p(x; c, theta).
    aux : object, str, or dict
        Auxiliary family instance, preset name ("close"/"far"), or config dict.
    beta : array-like, optional
        Auxiliary parameters. Defaults to the value carried by the auxiliary.
    divergence : str, default "ojs"
        One of "kl", "chi2", "js", "ojs", "dpow:<beta>".
    plug_in : bool, default True
        Refit the auxiliary parameters by MLE on the noise stratum before
        estimating (c, theta).
    noise_ratio : float, default 1.0
        Noise draws per data point when no noise sample is supplied to fit.
    random_state : int, default 0
        Seed for internally drawn noise.

    Attributes
    ----------
    alpha_ : Alpha
        Fitted extended parameter.
    c_, theta_ : float, ndarray
        Components of ``alpha_``.
    beta_ : ndarray
        Auxiliary parameters actually used (the MLE when ``plug_in``).
    result_ : FitResult
        Optimizer diagnostics.
    """

    def __init__(
        self,
        model=None,
        aux="close",
        beta=None,
        divergence="ojs",
        plug_in=True,
        noise_ratio=1.0,
        random_state=0,
    ):
        self.model = model
        self.aux = aux
        self.beta = beta
        self.divergence = divergence
        self.plug_in = plug_in
        self.noise_ratio = noise_ratio
        self.random_state = random_state

    def _resolve(self):
        from .models import Gauss1D

        model = self.model if self.model is not None else Gauss1D()
        if isinstance(self.aux, (str, dict)):
            aux, beta = aux_from_config(self.aux)
        else:
            aux, beta = self.aux, getattr(self.aux, "beta", None)
        if self.beta is not None:
            beta = np.asarray(self.beta, dtype=float)
        if beta is None:
            raise ValueError("auxiliary parameters are required (beta)")
        return model, aux, beta

    def fit(self, X, y=None, noise=None):
        """Fit (c, theta) from data ``X`` and a noise sample.

        ``noise`` may be given explicitly; otherwise ``noise_ratio * len(X)``
        draws are taken from the auxiliary at ``beta`` using ``random_state``.
        """
        model, aux, beta = self._resolve()
        x = as_points(X, model.point_dim)
        if noise is None:
            m2 = max(2, int(round(self.noise_ratio * x.shape[0])))
            noise = sample_aux(aux, beta, m2, RngState(self.random_state))
        noise = as_points(noise, model.point_dim)
        sample = SampleSet(x=x, y=noise)
        div = parse_divergence(self.divergence, nu=sample.m1 / sample.m2)
        prob = NceProblem(model=model, aux=aux, beta=beta, divergence=div, sample=sample)
        if self.plug_in:
            result, beta_used = fit_pl(prob)
        else:
            result, beta_used = fit_nc(prob), np.asarray(beta, dtype=float)
        self.model_, self.aux_ = model, aux
        self.alpha_ = result.alpha_hat
        self.c_ = result.alpha_hat.c
        self.theta_ = result.alpha_hat.theta
        self.beta_ = beta_used
        self.result_ = result
        self.n_iter_ = result.iterations
        return self

    def score_samples(self, X):
        """Estimated log density log p(x; alpha_hat)."""
        x = as_points(X, self.model_.point_dim)
        return self.model_.log_p(x, self.alpha_)

    def score(self, X, y=None):
        """Mean estimated log density, as for other density estimators."""
        return float(np.mean(self.score_samples(X)))
