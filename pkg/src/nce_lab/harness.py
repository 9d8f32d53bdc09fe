"""Monte Carlo experiment harness: replicated MSE sweeps and validation runs.

A sweep is described by an :class:`ExperimentPlan`: a target model with its
true parameters, an auxiliary configuration, a list of estimator tokens
(``pojs`` is the plug-in fit with the ratio-matched generator; ``ojs``,
``js``, ``kl``, ``chi`` are fixed-auxiliary fits), sample sizes, the stratum
ratio, a replication count, an optional contamination spec, and a base seed.

Reproducibility contract: replication r of cell (token, m) draws from a
stream seeded with ``base_seed XOR blake2b(token|m|r)``, so cells never share
randomness, removing one cell from a plan does not perturb another, and the
same plan always produces byte-identical CSV output regardless of the worker
count. Failed or non-converged replications are recorded as exclusions and
never abort a sweep.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .divergence import parse_divergence
from .errors import ConfigError, NceError
from .estimator import NceProblem, fit_nc, fit_pl
from .models import SampleSet, aux_from_config, model_from_config, sample_aux, sample_truth
from .numerics import RngState

GAUSS_SAMPLE_SIZES_FULL = (753, 1194, 1890, 3000, 4752, 7533, 11943, 18927)
GAUSS_SAMPLE_SIZES_DESK = (753, 3000, 11943)
TRUNC_SAMPLE_SIZES_FULL = (1000, 1600, 2000, 4000, 8000)
TRUNC_SAMPLE_SIZES_DESK = (1000, 4000)

# estimator tokens: (divergence name, plug the auxiliary MLE in?)
DIVERGENCE_TOKENS = {
    "pojs": ("ojs", True),
    "ojs": ("ojs", False),
    "js": ("js", False),
    "kl": ("kl", False),
    "chi": ("chi2", False),
    "chi2": ("chi2", False),
}

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Contamination:
    """Outliers appended to the data stratum of every replication."""

    value: tuple
    count: int


@dataclass(frozen=True)
class ExperimentPlan:
    model_config: dict
    aux_config: object
    divergences: tuple
    sample_sizes: tuple
    ratio: tuple
    replications: int
    base_seed: int
    contamination: Contamination | None = None

    def __post_init__(self):
        object.__setattr__(self, "divergences", tuple(self.divergences))
        object.__setattr__(self, "sample_sizes", tuple(int(m) for m in self.sample_sizes))
        object.__setattr__(self, "ratio", tuple(int(r) for r in self.ratio))
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        for token in self.divergences:
            if token not in DIVERGENCE_TOKENS:
                raise ConfigError(f"unknown estimator token {token!r}")

    def split(self, m: int):
        """m1 = round(m * ratio), m2 = m - m1."""
        r1, r2 = self.ratio
        m1 = int(round(m * r1 / (r1 + r2)))
        return m1, m - m1

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.contamination is not None:
            out["contamination"] = {
                "value": list(self.contamination.value),
                "count": self.contamination.count,
            }
        out["divergences"] = list(self.divergences)
        out["sample_sizes"] = list(self.sample_sizes)
        out["ratio"] = list(self.ratio)
        return out


@dataclass(frozen=True)
class MseRow:
    divergence: str
    m: int
    component: str
    mse: float
    stderr: float
    n_used: int
    n_excluded: int


@dataclass
class MseTable:
    rows: list
    metadata: dict
    # per-cell replication-level squared errors, kept only on request; not serialized
    raw: dict = field(default_factory=dict, repr=False)


def cell_seed(base_seed: int, token: str, m: int, rep: int) -> int:
    digest = hashlib.blake2b(f"{token}|{m}|{rep}".encode(), digest_size=8).digest()
    return (int(base_seed) ^ int.from_bytes(digest, "big")) & _MASK64


def _component_names(model):
    if model.d_theta == 1:
        return ("c", "theta")
    return ("D",)


def _component_sqerr(model, alpha_hat, truth):
    if model.d_theta == 1:
        return np.array(
            [(alpha_hat.c - truth.c) ** 2, float((alpha_hat.theta[0] - truth.theta[0]) ** 2)]
        )
    # matrix targets report the summed squared error over the free precision
    # entries, off-diagonals counted once
    return np.array([float(np.sum((alpha_hat.theta - truth.theta) ** 2))])


def _replicate(model, truth, aux, beta, token, m1, m2, contamination, seed):
    """One replication; returns component squared errors or None on exclusion."""
    rng = RngState(seed)
    x = sample_truth(model, truth, m1, rng)
    y = sample_aux(aux, beta, m2, rng)
    if contamination is not None and contamination.count > 0:
        extra = np.tile(
            np.asarray(contamination.value, dtype=float).reshape(1, -1),
            (contamination.count, 1),
        )
        x = np.vstack([x, extra])
    sample = SampleSet(x=x, y=y)
    name, plugin = DIVERGENCE_TOKENS[token]
    div = parse_divergence(name, nu=sample.m1 / sample.m2)
    prob = NceProblem(model=model, aux=aux, beta=beta, divergence=div, sample=sample)
    try:
        result = fit_pl(prob)[0] if plugin else fit_nc(prob)
    except NceError:
        return None
    if not result.converged:
        return None
    return _component_sqerr(model, result.alpha_hat, truth)


def _map_ordered(work, seeds, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, seeds))
    return [work(seed) for seed in seeds]


def run_mse_sweep(plan: ExperimentPlan, workers: int = 1, keep_errors: bool = False) -> MseTable:
    """Replicated componentwise MSE for every (estimator, sample size) cell."""
    model, truth = model_from_config(plan.model_config)
    aux, beta = aux_from_config(plan.aux_config)
    names = _component_names(model)
    rows, raw = [], {}
    for token in plan.divergences:
        for m in plan.sample_sizes:
            m1, m2 = plan.split(m)
            seeds = [cell_seed(plan.base_seed, token, m, r) for r in range(plan.replications)]

            def work(seed, _m1=m1, _m2=m2, _token=token):
                return _replicate(model, truth, aux, beta, _token, _m1, _m2, plan.contamination, seed)

            results = _map_ordered(work, seeds, workers)
            kept = [r for r in results if r is not None]
            errs = (
                np.array(kept).reshape(-1, len(names)) if kept else np.empty((0, len(names)))
            )
            n_used = errs.shape[0]
            n_excluded = plan.replications - n_used
            for j, comp in enumerate(names):
                if n_used == 0:
                    mse, stderr = math.nan, math.inf
                else:
                    col = errs[:, j]
                    mse = float(col.mean())
                    stderr = (
                        float(col.std(ddof=1) / math.sqrt(n_used)) if n_used > 1 else math.inf
                    )
                rows.append(
                    MseRow(
                        divergence=token,
                        m=m,
                        component=comp,
                        mse=mse,
                        stderr=stderr,
                        n_used=n_used,
                        n_excluded=n_excluded,
                    )
                )
            if keep_errors:
                raw[(token, m)] = errs
    metadata = {
        "plan": plan.to_dict(),
        "squared_error_convention": (
            "componentwise for scalar targets; summed over the 6 free precision "
            "entries (off-diagonals counted once) for the matrix target"
        ),
    }
    return MseTable(rows=rows, metadata=metadata, raw=raw)


def run_contamination(plan: ExperimentPlan, workers: int = 1, keep_errors: bool = False) -> MseTable:
    """Sweep with the plan's outliers appended to every data stratum."""
    if plan.contamination is None:
        raise ConfigError("contamination sweep needs a contamination spec in the plan")
    return run_mse_sweep(plan, workers=workers, keep_errors=keep_errors)


def run_truncated_experiment(plan: ExperimentPlan, workers: int = 1, keep_errors: bool = False) -> MseTable:
    """Matrix-target sweep; reports the summed squared error of the precision entries."""
    if plan.model_config.get("kind") != "trunc_precision3d":
        raise ConfigError("the truncated experiment needs the trunc_precision3d model")
    return run_mse_sweep(plan, workers=workers, keep_errors=keep_errors)


def run_variance_validation(
    plan: ExperimentPlan, m: int, reps: int, token: str = "ojs", workers: int = 1
) -> dict:
    """Compare m-scaled empirical MSE against the analytic covariance diagonal.

    Scalar targets only; the analytic side comes from the quadrature backend.
    With ``reps == 1`` the record carries infinite standard errors.
    """
    from .inference import asvar, sandwich_matrices

    model, truth = model_from_config(plan.model_config)
    aux, beta = aux_from_config(plan.aux_config)
    if model.d_theta != 1:
        raise ConfigError("variance validation is wired for scalar targets")
    name, plugin = DIVERGENCE_TOKENS[token]
    m1, m2 = plan.split(m)
    seeds = [cell_seed(plan.base_seed, f"vv-{token}", m, r) for r in range(reps)]

    def work(seed):
        return _replicate(model, truth, aux, beta, token, m1, m2, None, seed)

    results = _map_ordered(work, seeds, workers)
    kept = [r for r in results if r is not None]
    errs = np.array(kept).reshape(-1, 2) if kept else np.empty((0, 2))
    n_used = errs.shape[0]
    scaled = m * errs
    empirical = scaled.mean(axis=0) if n_used else np.array([math.nan, math.nan])
    stderr = (
        scaled.std(axis=0, ddof=1) / math.sqrt(n_used)
        if n_used > 1
        else np.array([math.inf, math.inf])
    )

    div = parse_divergence(name, nu=m1 / m2)
    sm = sandwich_matrices(model, aux, div, (truth, beta), m1 / m, backend="quad")
    report = asvar(sm, scaled_by="m")
    analytic = np.diag(report.asvar_pl if plugin else report.asvar_nc)
    gap = np.abs(empirical - analytic) / np.abs(analytic)
    return {
        "m": m,
        "replications": reps,
        "n_used": n_used,
        "n_excluded": reps - n_used,
        "divergence": token,
        "components": list(_component_names(model)),
        "empirical": [float(v) for v in empirical],
        "empirical_stderr": [float(v) for v in stderr],
        "analytic": [float(v) for v in analytic],
        "relative_gap": [float(v) for v in gap],
    }


def bootstrap_prob_mean_less(a, b, n_boot: int = 2000, seed: int = 13) -> float:
    """Bootstrap estimate of P(mean(a) < mean(b)) for two independent samples."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        return math.nan
    rng = RngState(seed)
    idx_a = rng.integers(0, a.size, (n_boot, a.size))
    idx_b = rng.integers(0, b.size, (n_boot, b.size))
    return float(np.mean(a[idx_a].mean(axis=1) < b[idx_b].mean(axis=1)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _format_float(v: float) -> str:
    return format(v, ".17g")


def _json_number(v: float):
    return v if math.isfinite(v) else None


def _table_payload(table: MseTable) -> dict:
    return {
        "metadata": table.metadata,
        "rows": [
            {
                "divergence": r.divergence,
                "m": r.m,
                "component": r.component,
                "mse": _json_number(r.mse),
                "stderr": _json_number(r.stderr),
                "n_used": r.n_used,
                "n_excluded": r.n_excluded,
            }
            for r in table.rows
        ],
    }


def table_to_csv(table: MseTable) -> str:
    lines = ["divergence,m,component,mse,stderr,n_used,n_excluded"]
    for r in table.rows:
        lines.append(
            f"{r.divergence},{r.m},{r.component},{_format_float(r.mse)},"
            f"{_format_float(r.stderr)},{r.n_used},{r.n_excluded}"
        )
    return "\n".join(lines) + "\n"


def table_from_csv(text: str) -> list:
    rows = []
    lines = [ln for ln in text.strip().splitlines() if ln]
    for line in lines[1:]:
        d, m, comp, mse, stderr, used, excluded = line.split(",")
        rows.append(
            MseRow(
                divergence=d,
                m=int(m),
                component=comp,
                mse=float(mse),
                stderr=float(stderr),
                n_used=int(used),
                n_excluded=int(excluded),
            )
        )
    return rows


_SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def table_to_svg(table: MseTable) -> str:
    """Log-log MSE-versus-m polylines, one per estimator token."""
    by_div: dict[str, dict[int, float]] = {}
    for r in table.rows:
        by_div.setdefault(r.divergence, {}).setdefault(r.m, 0.0)
        by_div[r.divergence][r.m] += r.mse if math.isfinite(r.mse) else 0.0
    sizes = sorted({r.m for r in table.rows})
    if len(sizes) < 2:
        raise ValueError("an SVG plot needs at least two sample sizes")
    width, height, pad = 640.0, 440.0, 60.0
    xs = [math.log10(m) for m in sizes]
    all_vals = [v for series in by_div.values() for v in series.values() if v > 0]
    ys = [math.log10(v) for v in all_vals] or [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    y_hi = y_hi if y_hi > y_lo else y_lo + 1.0

    def to_px(m, v):
        px = pad + (math.log10(m) - x_lo) / (x_hi - x_lo) * (width - 2 * pad)
        py = height - pad - (math.log10(max(v, 1e-300)) - y_lo) / (y_hi - y_lo) * (
            height - 2 * pad
        )
        return f"{px:.3f},{py:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12:.0f}" text-anchor="middle" '
        f'font-size="13">sample size m (log scale)</text>',
        f'<text x="16" y="{height / 2:.0f}" font-size="13" '
        f'transform="rotate(-90 16 {height / 2:.0f})" text-anchor="middle">MSE (log scale)</text>',
    ]
    for k, (token, series) in enumerate(sorted(by_div.items())):
        pts = " ".join(to_px(m, series[m]) for m in sorted(series))
        color = _SVG_PALETTE[k % len(_SVG_PALETTE)]
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{pts}"/>'
        )
        parts.append(
            f'<text x="{width - pad + 6:.0f}" y="{pad + 16 * k:.0f}" font-size="12" '
            f'fill="{color}">{token}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_results(table: MseTable, fmt: str, path) -> Path:
    """Write a table as csv, json, or svg; returns the written path."""
    path = Path(path)
    if fmt in ("csv", "json") and not table.rows:
        raise ValueError(f"cannot emit an empty table as {fmt}")
    if fmt == "csv":
        payload = table_to_csv(table)
    elif fmt == "json":
        payload = json.dumps(_table_payload(table), indent=2, sort_keys=True) + "\n"
    elif fmt == "svg":
        payload = table_to_svg(table)
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload)
    return path


# ---------------------------------------------------------------------------
# plan loading
# ---------------------------------------------------------------------------


def _load_schema(name: str) -> dict:
    return json.loads(resources.files("nce_lab").joinpath(f"schemas/{name}").read_text())


def validate_table_payload(payload: dict) -> None:
    import jsonschema

    jsonschema.validate(payload, _load_schema("mse_table.schema.json"))


def plan_from_dict(cfg: dict) -> ExperimentPlan:
    """Build and validate a plan from parsed JSON."""
    import jsonschema

    try:
        jsonschema.validate(cfg, _load_schema("plan.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"experiment plan failed validation: {exc.message}") from exc
    sizes = cfg["sample_sizes"]
    if isinstance(sizes, str):
        is_trunc = cfg["model"].get("kind") == "trunc_precision3d"
        grids = {
            "desk": TRUNC_SAMPLE_SIZES_DESK if is_trunc else GAUSS_SAMPLE_SIZES_DESK,
            "full": TRUNC_SAMPLE_SIZES_FULL if is_trunc else GAUSS_SAMPLE_SIZES_FULL,
        }
        try:
            sizes = grids[sizes]
        except KeyError as exc:
            raise ConfigError(f"unknown sample-size preset {sizes!r}") from exc
    contamination = None
    if cfg.get("contamination") is not None:
        raw_value = cfg["contamination"]["value"]
        value = tuple(raw_value) if isinstance(raw_value, (list, tuple)) else (raw_value,)
        contamination = Contamination(value=value, count=int(cfg["contamination"]["count"]))
    return ExperimentPlan(
        model_config=cfg["model"],
        aux_config=cfg["aux"],
        divergences=tuple(cfg["divergences"]),
        sample_sizes=tuple(sizes),
        ratio=tuple(cfg["ratio"]),
        replications=int(cfg["replications"]),
        base_seed=int(cfg["base_seed"]),
        contamination=contamination,
    )


def load_plan(path) -> ExperimentPlan:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read experiment plan {path}: {exc}") from exc
    return plan_from_dict(cfg)


def with_full_grid(plan: ExperimentPlan) -> ExperimentPlan:
    """Swap the plan onto the full published sample-size grid for its model."""
    is_trunc = plan.model_config.get("kind") == "trunc_precision3d"
    grid = TRUNC_SAMPLE_SIZES_FULL if is_trunc else GAUSS_SAMPLE_SIZES_FULL
    return replace(plan, sample_sizes=grid)
