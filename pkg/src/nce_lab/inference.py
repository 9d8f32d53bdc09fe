"""Asymptotic variance machinery for the stratified contrastive estimators.

Write s(x) = (1, -grad_theta h(x)) for the extended-parameter score,
psi(r) = f''(r) r for the divergence weight, r*(x) = p(x; alpha*)/n(x; beta*),
lam1 = m1/m, lam2 = m2/m, and kappa = lam1 * lam2. The sandwich blocks are

    A = -kappa E_p[ psi(r*) s s' ]                     (curvature, symmetric)
    B =  kappa E_n[ psi(r*) r* s g' ]                  (coupling to the auxiliary)
    C =  kappa E_n[ g g' ]                             (auxiliary Fisher information)
    G =  kappa ( E_p[ psi^2 (lam2 + lam1 r*) s s' ] - E_p[psi s] E_p[psi s]' )

with g(x) the auxiliary score. Scaled by the pooled sample size m, the
fixed-auxiliary estimator has variance A^-1 G A^-1 and the plug-in estimator
A^-1 (G - lam1 B C^-1 B') A^-1; the difference lam1 A^-1 B C^-1 B' A^-1 is
positive semi-definite, so plugging in the auxiliary MLE never hurts.

The minimum of the fixed-auxiliary variance over the whole weight class is

    (1/kappa) (H^-1 - Lambda),   H = E_p[ Omega(x) / (lam2 + lam1 r*(x)) ],

with Omega = s s' and Lambda = diag(1, 0, ..., 0); it is attained by the
ratio-matched generator (OptimalJS with nu = m1/m2). A pooled-sample plug-in
estimate of H drives Wald tests and confidence statements.

Expectations come from one of two backends: deterministic composite Simpson
quadrature (Gauss1D targets with a Gaussian auxiliary only) or Monte Carlo
with a seeded stream and fixed chunking, reproducible for any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import Divergence
from .errors import NotPositiveDefinite, SingularA, SingularH, SingularOmega
from .models import Alpha, GaussMeanVar1D, Gauss1D, SampleSet, as_points
from .numerics import (
    RngState,
    cholesky_inverse,
    min_eigenvalue,
    simpson_weights,
    symmetrize,
)

_CLAMP = 700.0
DEFAULT_MC_DRAWS = 1_000_000
DEFAULT_PANELS = 10_000
_MC_CHUNK = 262_144


@dataclass(frozen=True)
class SandwichMatrices:
    """Variance blocks of the stratified estimating equation."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    G: np.ndarray
    lambda1: float

    @property
    def lambda2(self) -> float:
        return 1.0 - self.lambda1


@dataclass(frozen=True)
class AsvarReport:
    """Asymptotic covariances of the two estimators and their gap."""

    asvar_nc: np.ndarray
    asvar_pl: np.ndarray
    reduction: np.ndarray
    scaled_by: str


def _lambda_block(dim: int) -> np.ndarray:
    lam = np.zeros((dim, dim))
    lam[0, 0] = 1.0
    return lam


def _clamped_exp(z):
    return np.exp(np.clip(z, -_CLAMP, _CLAMP))


class _MomentAccumulator:
    """Weighted second-moment sums shared by the quadrature and MC backends.

    ``add_p`` consumes target-distribution nodes (or draws) with their
    integration weights; ``add_n`` consumes auxiliary ones. Weights must sum
    to one per measure (the backends normalize).
    """

    def __init__(self, d_alpha: int, d_beta: int, divergence: Divergence, lam1: float):
        self.div = divergence
        self.lam1 = lam1
        self.lam2 = 1.0 - lam1
        self.psi_ssT = np.zeros((d_alpha, d_alpha))
        self.psi_s = np.zeros(d_alpha)
        self.gvar_ssT = np.zeros((d_alpha, d_alpha))
        self.hinv_ssT = np.zeros((d_alpha, d_alpha))
        self.omega = np.zeros((d_alpha, d_alpha))
        self.coupling = np.zeros((d_alpha, d_beta))
        self.aux_fisher = np.zeros((d_beta, d_beta))

    def add_p(self, score, t, weights):
        lp = self.div.log_psi(t)
        psi = _clamped_exp(lp)
        mix = np.logaddexp(math.log(self.lam2), math.log(self.lam1) + t)
        gw = _clamped_exp(2.0 * lp + mix)
        hw = _clamped_exp(-mix)
        sw = score * weights[:, None]
        self.psi_ssT += sw.T @ (score * psi[:, None])
        self.psi_s += sw.T @ psi
        self.gvar_ssT += sw.T @ (score * gw[:, None])
        self.hinv_ssT += sw.T @ (score * hw[:, None])
        self.omega += sw.T @ score

    def add_n(self, score, t, aux_score, weights):
        lp = self.div.log_psi(t)
        psi_r = _clamped_exp(lp + t)
        sw = score * (psi_r * weights)[:, None]
        self.coupling += sw.T @ aux_score
        gw = aux_score * weights[:, None]
        self.aux_fisher += gw.T @ aux_score

    def assemble(self) -> SandwichMatrices:
        kappa = self.lam1 * self.lam2
        a = -kappa * symmetrize(self.psi_ssT)
        g = kappa * symmetrize(self.gvar_ssT - np.outer(self.psi_s, self.psi_s))
        b = kappa * self.coupling
        c = kappa * symmetrize(self.aux_fisher)
        try:
            cholesky_inverse(-a)
        except NotPositiveDefinite as exc:
            raise SingularA(f"curvature block is numerically singular: {exc}") from exc
        return SandwichMatrices(A=a, B=b, C=c, G=g, lambda1=self.lam1)

    def optimal_curvature(self) -> np.ndarray:
        return symmetrize(self.hinv_ssT)

    def score_second_moment(self) -> np.ndarray:
        return symmetrize(self.omega)


def _quad_nodes(model, alpha_star: Alpha, aux, beta_star, panels: int):
    """Shared Simpson grid covering ten standard deviations of both densities."""
    if not isinstance(model, Gauss1D) or not isinstance(aux, GaussMeanVar1D):
        raise ValueError("the quadrature backend supports Gauss1D with a Gaussian auxiliary")
    theta = float(alpha_star.theta[0])
    if theta <= 0.0:
        raise ValueError("quadrature needs a proper target density (theta > 0)")
    sd_p = math.sqrt(1.0 / (2.0 * theta))
    mu_n, v_n = float(beta_star[0]), float(beta_star[1])
    sd_n = math.sqrt(v_n)
    lo = min(-10.0 * sd_p, mu_n - 10.0 * sd_n)
    hi = max(10.0 * sd_p, mu_n + 10.0 * sd_n)
    xs = np.linspace(lo, hi, panels + 1).reshape(-1, 1)
    w = simpson_weights(panels + 1, (hi - lo) / panels)
    return xs, w


def _normalized(weights):
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ValueError("degenerate integration weights")
    return weights / total


def _model_score(model, x):
    feats = model.grad_theta_h(x)
    return np.column_stack([np.ones(x.shape[0]), -feats])


def _accumulate_quad(acc, model, aux, alpha_star, beta_star, panels):
    xs, w = _quad_nodes(model, alpha_star, aux, beta_star, panels)
    log_p = model.log_p(xs, alpha_star)
    log_n = aux.log_density(xs, beta_star)
    t = log_p - log_n
    score = _model_score(model, xs)
    acc.add_p(score, t, _normalized(w * np.exp(log_p)))
    acc.add_n(score, t, aux.grad_log_density(xs, beta_star), _normalized(w * np.exp(log_n)))


def _accumulate_mc(acc, model, aux, alpha_star, beta_star, draws, rng):
    remaining = draws
    while remaining > 0:
        size = min(_MC_CHUNK, remaining)
        x = model.sample_truth(alpha_star, size, rng)
        t = model.log_p(x, alpha_star) - aux.log_density(x, beta_star)
        acc.add_p(_model_score(model, x), t, np.full(size, 1.0 / draws))
        remaining -= size
    remaining = draws
    while remaining > 0:
        size = min(_MC_CHUNK, remaining)
        y = aux.sample(beta_star, size, rng)
        t = model.log_p(y, alpha_star) - aux.log_density(y, beta_star)
        acc.add_n(
            _model_score(model, y),
            t,
            aux.grad_log_density(y, beta_star),
            np.full(size, 1.0 / draws),
        )
        remaining -= size


def _build_accumulator(
    model, aux, divergence, alpha_star, beta_star, lambda1, backend, mc_draws, rng, panels
):
    if not 0.0 < lambda1 < 1.0:
        raise ValueError("lambda1 must lie strictly between 0 and 1")
    d_alpha = 1 + model.d_theta
    acc = _MomentAccumulator(d_alpha, aux.d_beta, divergence, lambda1)
    if backend == "quad":
        _accumulate_quad(acc, model, aux, alpha_star, beta_star, panels)
    elif backend == "mc":
        rng = rng if rng is not None else RngState(2024)
        _accumulate_mc(acc, model, aux, alpha_star, beta_star, int(mc_draws), rng)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return acc


def sandwich_matrices(
    model,
    aux,
    divergence: Divergence,
    gamma_star,
    lambda1: float,
    mc_draws: int = DEFAULT_MC_DRAWS,
    rng: RngState | None = None,
    backend: str = "mc",
    panels: int = DEFAULT_PANELS,
) -> SandwichMatrices:
    """Estimate the variance blocks at gamma_star = (alpha, beta).

    Target-side expectations use the density p(.; alpha); auxiliary-side ones
    use n(.; beta). With ``backend="quad"`` the Gauss1D integrals are computed
    by composite Simpson; with ``backend="mc"`` by seeded Monte Carlo.
    """
    alpha_star, beta_star = gamma_star
    acc = _build_accumulator(
        model, aux, divergence, alpha_star, beta_star, lambda1, backend, mc_draws, rng, panels
    )
    return acc.assemble()


def asvar(sm: SandwichMatrices, scaled_by: str = "m") -> AsvarReport:
    """Asymptotic covariances from the sandwich blocks.

    ``scaled_by="m"`` reports the covariance of sqrt(m)(estimate - truth);
    ``scaled_by="m1"`` multiplies by lambda1 so the scaling refers to the
    data stratum alone, which is the natural scale for comparisons with
    maximum likelihood on normalized models.
    """
    if scaled_by not in ("m", "m1"):
        raise ValueError("scaled_by must be 'm' or 'm1'")
    try:
        a_inv = -cholesky_inverse(-sm.A)
    except NotPositiveDefinite as exc:
        raise SingularA(str(exc)) from exc
    c_inv = cholesky_inverse(sm.C)
    nc = symmetrize(a_inv @ sm.G @ a_inv)
    reduction = symmetrize(sm.lambda1 * a_inv @ sm.B @ c_inv @ sm.B.T @ a_inv)
    factor = 1.0 if scaled_by == "m" else sm.lambda1
    return AsvarReport(
        asvar_nc=factor * nc,
        asvar_pl=factor * (nc - reduction),
        reduction=factor * reduction,
        scaled_by=scaled_by,
    )


def optimal_nc_variance(
    model,
    aux,
    true_alpha: Alpha,
    lambda1: float,
    backend: str = "quad",
    beta_star=None,
    mc_draws: int = DEFAULT_MC_DRAWS,
    rng: RngState | None = None,
    panels: int = DEFAULT_PANELS,
) -> np.ndarray:
    """Smallest achievable fixed-auxiliary covariance, (1/kappa)(H^-1 - Lambda)."""
    if beta_star is None:
        beta_star = getattr(aux, "beta", None)
    if beta_star is None:
        raise ValueError("auxiliary parameters are required")
    from .divergence import KL

    acc = _build_accumulator(
        model, aux, KL(), true_alpha, beta_star, lambda1, backend, mc_draws, rng, panels
    )
    curvature = acc.optimal_curvature()
    try:
        h_inv = cholesky_inverse(curvature)
    except NotPositiveDefinite as exc:
        raise SingularH(str(exc)) from exc
    kappa = lambda1 * (1.0 - lambda1)
    return (h_inv - _lambda_block(h_inv.shape[0])) / kappa


def plugin_lower_bound(
    model,
    true_alpha: Alpha,
    lambda1: float,
    backend: str = "quad",
    mc_draws: int = DEFAULT_MC_DRAWS,
    rng: RngState | None = None,
    panels: int = DEFAULT_PANELS,
) -> np.ndarray:
    """Floor for the plug-in covariance over all auxiliaries and weights,
    (1/kappa)(lam2 E_p[Omega]^-1 - Lambda)."""
    if not 0.0 < lambda1 < 1.0:
        raise ValueError("lambda1 must lie strictly between 0 and 1")
    omega = score_second_moment(model, true_alpha, backend=backend, mc_draws=mc_draws, rng=rng, panels=panels)
    try:
        omega_inv = cholesky_inverse(omega)
    except NotPositiveDefinite as exc:
        raise SingularOmega(str(exc)) from exc
    lam2 = 1.0 - lambda1
    kappa = lambda1 * lam2
    return (lam2 * omega_inv - _lambda_block(omega_inv.shape[0])) / kappa


def score_second_moment(
    model,
    true_alpha: Alpha,
    backend: str = "quad",
    mc_draws: int = DEFAULT_MC_DRAWS,
    rng: RngState | None = None,
    panels: int = DEFAULT_PANELS,
) -> np.ndarray:
    """E_p[s s'] under the target density; the building block of the bounds."""
    if backend == "quad":
        if not isinstance(model, Gauss1D):
            raise ValueError("the quadrature backend supports Gauss1D only")
        theta = float(true_alpha.theta[0])
        sd = math.sqrt(1.0 / (2.0 * theta))
        xs = np.linspace(-10.0 * sd, 10.0 * sd, DEFAULT_PANELS + 1).reshape(-1, 1)
        w = simpson_weights(xs.shape[0], xs[1, 0] - xs[0, 0])
        weights = _normalized(w * np.exp(model.log_p(xs, true_alpha)))
        score = _model_score(model, xs)
        return symmetrize((score * weights[:, None]).T @ score)
    if backend == "mc":
        rng = rng if rng is not None else RngState(2024)
        d_alpha = 1 + model.d_theta
        total = np.zeros((d_alpha, d_alpha))
        remaining = int(mc_draws)
        while remaining > 0:
            size = min(_MC_CHUNK, remaining)
            x = model.sample_truth(true_alpha, size, rng)
            score = _model_score(model, x)
            total += score.T @ score
            remaining -= size
        return symmetrize(total / int(mc_draws))
    raise ValueError(f"unknown backend {backend!r}")


def empirical_optimal_curvature(
    sample: SampleSet, model, aux, alpha_hat: Alpha, beta_star
) -> np.ndarray:
    """Pooled-sample plug-in estimate of the optimal-variance curvature H.

    Averages Omega(z) p(z) n(z) / (lam2 n(z) + lam1 p(z))^2 over the pooled
    strata, evaluated at the fitted parameters.
    """
    z = np.vstack([sample.x, sample.y])
    lam1 = sample.m1 / sample.m
    lam2 = 1.0 - lam1
    log_p = model.log_p(z, alpha_hat)
    log_n = aux.log_density(z, beta_star)
    log_mix = np.logaddexp(math.log(lam2) + log_n, math.log(lam1) + log_p)
    w = _clamped_exp(log_p + log_n - 2.0 * log_mix)
    score = _model_score(model, z)
    return symmetrize((score * w[:, None]).T @ score / sample.m)


def asvar_from_empirical_curvature(curvature: np.ndarray, m1: int, m2: int) -> np.ndarray:
    """Consistent covariance estimate (1/kappa)(H_hat^-1 - Lambda)."""
    lam1 = m1 / (m1 + m2)
    kappa = lam1 * (1.0 - lam1)
    try:
        h_inv = cholesky_inverse(curvature)
    except NotPositiveDefinite as exc:
        raise SingularH(str(exc)) from exc
    return (h_inv - _lambda_block(h_inv.shape[0])) / kappa


def wald_statistic(alpha_hat: Alpha, alpha0: Alpha, asvar_hat: np.ndarray, m: int) -> float:
    """Quadratic form m (a - a0)' Cov^-1 (a - a0); asymptotically chi-squared.

    ``asvar_hat`` is the m-scaled covariance estimate and must be positive
    definite; the inverse-covariance form is what carries the chi-squared
    calibration.
    """
    delta = alpha_hat.as_vector() - alpha0.as_vector()
    inv = cholesky_inverse(np.asarray(asvar_hat, dtype=float))
    return float(m * delta @ inv @ delta)


# ---------------------------------------------------------------------------
# closed-form special cases used as cross-checks
# ---------------------------------------------------------------------------


def _rel_frobenius(computed: np.ndarray, reference: np.ndarray) -> float:
    denom = np.linalg.norm(reference)
    return float(np.linalg.norm(computed - reference) / (denom if denom > 0 else 1.0))


def special_case_identities(
    model,
    true_alpha: Alpha,
    lambda1: float,
    backend: str = "quad",
    panels: int = DEFAULT_PANELS,
) -> dict:
    """Evaluate the closed-form special cases of the variance formulas.

    Returns {"residuals": name -> relative discrepancy, "values": extras}.
    The checks cover: the KL sandwich against its direct integral form, the
    matched-auxiliary (ratio identically one) simplifications, the equality
    of the plug-in theta-block with the MLE variance in the matched case, the
    block-inverse structure of E_p[Omega]^-1, the noise-dominant limit where
    both estimators collapse to the same covariance, and the variance of the
    offset component expressed through e/(1-e) with
    e = E[grad h]' E[grad h grad h']^-1 E[grad h].
    """
    from .divergence import KL

    if not isinstance(model, Gauss1D):
        raise ValueError("closed-form checks are wired for the Gauss1D target")
    theta = float(true_alpha.theta[0])
    v_star = 1.0 / (2.0 * theta)
    aux_truth = GaussMeanVar1D([0.0, v_star])
    aux_displaced = GaussMeanVar1D([0.2, 1.2 * v_star])
    lam2 = 1.0 - lambda1
    kl = KL()

    residuals: dict[str, float] = {}
    values: dict[str, object] = {}

    # direct grid moments for the reference formulas
    xs, w = _quad_nodes(model, true_alpha, aux_displaced, aux_displaced.beta, panels)
    p_weights = _normalized(w * np.exp(model.log_p(xs, true_alpha)))
    score = _model_score(model, xs)
    grads = model.grad_theta_h(xs)
    omega = symmetrize((score * p_weights[:, None]).T @ score)
    omega_inv = cholesky_inverse(omega)
    lam_block = _lambda_block(omega.shape[0])
    grad_mean = (grads * p_weights[:, None]).sum(axis=0)
    grad_second = (grads * p_weights[:, None]).T @ grads
    grad_var = symmetrize(grad_second - np.outer(grad_mean, grad_mean))
    grad_var_inv = cholesky_inverse(grad_var)
    values["mle_asvar_theta"] = grad_var_inv
    values["score_second_moment"] = omega

    # KL closed form with a displaced auxiliary, on the data-stratum scale
    t = model.log_p(xs, true_alpha) - aux_displaced.log_density(xs, aux_displaced.beta)
    mix = lam2 + lambda1 * np.exp(t)
    omega_mix = symmetrize((score * (p_weights * mix)[:, None]).T @ score)
    reference = (omega_inv @ omega_mix @ omega_inv - lam_block) / lam2
    sm = sandwich_matrices(
        model, aux_displaced, kl, (true_alpha, aux_displaced.beta), lambda1, backend="quad",
        panels=panels,
    )
    computed = asvar(sm, scaled_by="m1").asvar_nc
    residuals["kl_closed_form"] = _rel_frobenius(computed, reference)

    # matched auxiliary: the ratio is identically one
    sm_truth = sandwich_matrices(
        model, aux_truth, kl, (true_alpha, aux_truth.beta), lambda1, backend="quad",
        panels=panels,
    )
    report_truth = asvar(sm_truth, scaled_by="m1")
    residuals["matched_aux_nc"] = _rel_frobenius(
        report_truth.asvar_nc, (omega_inv - lam_block) / lam2
    )
    residuals["matched_aux_pl_theta_mle"] = _rel_frobenius(
        report_truth.asvar_pl[1:, 1:], grad_var_inv
    )

    # block-inverse structure of the score second moment
    u = grad_mean
    upper_left = 1.0 + u @ grad_var_inv @ u
    assembled = np.empty_like(omega)
    assembled[0, 0] = upper_left
    assembled[0, 1:] = -(grad_var_inv @ u)
    assembled[1:, 0] = -(grad_var_inv @ u)
    assembled[1:, 1:] = grad_var_inv
    residuals["inverse_moment_block"] = _rel_frobenius(omega_inv, assembled)
    e = float(u @ cholesky_inverse(symmetrize(grad_second)) @ u)
    values["e"] = e
    residuals["inverse_moment_c_entry"] = abs(omega_inv[0, 0] - 1.0 / (1.0 - e)) / (
        1.0 / (1.0 - e)
    )

    # noise-dominant limit: both covariances approach E[Omega]^-1 - Lambda
    eps = 1e-6
    sm_limit = sandwich_matrices(
        model, aux_displaced, kl, (true_alpha, aux_displaced.beta), eps, backend="quad",
        panels=panels,
    )
    report_limit = asvar(sm_limit, scaled_by="m1")
    limit_reference = omega_inv - lam_block
    residuals["noise_dominant_nc"] = _rel_frobenius(report_limit.asvar_nc, limit_reference)
    residuals["noise_dominant_pl"] = _rel_frobenius(report_limit.asvar_pl, limit_reference)
    residuals["offset_variance_ratio"] = abs(limit_reference[0, 0] - e / (1.0 - e)) / max(
        e / (1.0 - e), 1e-12
    )
    return {"residuals": residuals, "values": values}


def reduction_is_psd(sm: SandwichMatrices, tol: float = 1e-8) -> bool:
    """Check that the plug-in variance reduction is positive semi-definite."""
    red = asvar(sm).reduction
    norm = np.linalg.norm(red)
    return min_eigenvalue(red) >= -tol * max(norm, 1e-300)
