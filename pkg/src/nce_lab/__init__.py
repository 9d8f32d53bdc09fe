"""Noise contrastive estimation for unnormalized models.

Estimate the parameters of a density known only up to its normalizing
constant by contrasting data against draws from a tractable auxiliary
distribution. The package covers a menu of contrastive objectives, a
variance-reducing plug-in variant that refits the auxiliary parameters by
maximum likelihood, the full asymptotic covariance machinery with optimality
bounds and Wald inference, and a reproducible Monte Carlo experiment harness.
"""

from .divergence import (
    ChiSquare,
    DensityPower,
    Divergence,
    JensenShannon,
    KL,
    OptimalJS,
    parse_divergence,
)
from .errors import NceError
from .estimator import (
    FitResult,
    NceProblem,
    NoiseContrastiveEstimator,
    estimating_equation,
    fit_nc,
    fit_pl,
    objective,
)
from .harness import (
    Contamination,
    ExperimentPlan,
    MseRow,
    MseTable,
    emit_results,
    load_plan,
    run_contamination,
    run_mse_sweep,
    run_truncated_experiment,
    run_variance_validation,
)
from .inference import (
    AsvarReport,
    SandwichMatrices,
    asvar,
    asvar_from_empirical_curvature,
    empirical_optimal_curvature,
    optimal_nc_variance,
    plugin_lower_bound,
    sandwich_matrices,
    special_case_identities,
    wald_statistic,
)
from .models import (
    Alpha,
    GaussMeanVar1D,
    Gauss1D,
    SampleSet,
    TruncDiagNormal3D,
    TruncPrecision3D,
    aux_from_config,
    aux_mle,
    draw_sample_set,
    grad_log_aux,
    log_density_ratio,
    model_from_config,
    sample_aux,
    sample_truth,
)
from .numerics import RngState, cholesky_inverse, draw_std_normal, min_eigenvalue, std_normal_cdf

__version__ = "0.1.0"

__all__ = [
    "Alpha",
    "AsvarReport",
    "ChiSquare",
    "Contamination",
    "DensityPower",
    "Divergence",
    "ExperimentPlan",
    "FitResult",
    "GaussMeanVar1D",
    "Gauss1D",
    "JensenShannon",
    "KL",
    "MseRow",
    "MseTable",
    "NceError",
    "NceProblem",
    "NoiseContrastiveEstimator",
    "OptimalJS",
    "RngState",
    "SampleSet",
    "SandwichMatrices",
    "TruncDiagNormal3D",
    "TruncPrecision3D",
    "asvar",
    "asvar_from_empirical_curvature",
    "aux_from_config",
    "aux_mle",
    "cholesky_inverse",
    "draw_sample_set",
    "draw_std_normal",
    "emit_results",
    "empirical_optimal_curvature",
    "estimating_equation",
    "fit_nc",
    "fit_pl",
    "grad_log_aux",
    "load_plan",
    "log_density_ratio",
    "min_eigenvalue",
    "model_from_config",
    "objective",
    "optimal_nc_variance",
    "parse_divergence",
    "plugin_lower_bound",
    "run_contamination",
    "run_mse_sweep",
    "run_truncated_experiment",
    "run_variance_validation",
    "sample_aux",
    "sample_truth",
    "sandwich_matrices",
    "special_case_identities",
    "std_normal_cdf",
    "wald_statistic",
]
