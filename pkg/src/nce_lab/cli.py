"""Command line front end: fit / asvar / experiment / validate.

Every run is pure given its configuration and seed. When an output directory
is supplied the resolved configuration is echoed into it next to the
artifacts, so results stay auditable. Exit codes: 0 success, 1 configuration
or validation error, 2 partial experiment failure (a cell lost every
replication).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .divergence import parse_divergence
from .errors import ConfigError, NceError
from .estimator import NceProblem, fit_nc, fit_pl
from .harness import (
    emit_results,
    load_plan,
    run_mse_sweep,
    with_full_grid,
)
from .inference import asvar, sandwich_matrices, special_case_identities
from .models import aux_from_config, draw_sample_set, model_from_config
from .numerics import RngState, min_eigenvalue

IDENTITY_TOLERANCE = 1e-4


def _read_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _echo_config(out_dir: str | None, name: str, payload: dict) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _matrix(m: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(m)]


def _cmd_fit(args) -> int:
    cfg = _read_config(args.config)
    model, truth = model_from_config(cfg["model"])
    aux, beta = aux_from_config(cfg["aux"])
    rng = RngState(args.seed)
    sample = draw_sample_set(model, truth, aux, beta, args.m1, args.m2, rng)
    div = parse_divergence(args.divergence, nu=sample.m1 / sample.m2)
    prob = NceProblem(model=model, aux=aux, beta=beta, divergence=div, sample=sample)
    if args.plugin:
        result, beta_hat = fit_pl(prob)
    else:
        result, beta_hat = fit_nc(prob), None
    payload = {
        "alpha_hat": [float(v) for v in result.alpha_hat.as_vector()],
        "objective": result.objective_value,
        "gradient_norm": result.gradient_norm,
        "iterations": result.iterations,
        "converged": result.converged,
    }
    if beta_hat is not None:
        payload["beta_hat"] = [float(v) for v in beta_hat]
    resolved = {
        "subcommand": "fit",
        "config": cfg,
        "divergence": args.divergence,
        "plugin": args.plugin,
        "seed": args.seed,
        "m1": args.m1,
        "m2": args.m2,
    }
    _echo_config(args.out, "fit_config.json", resolved)
    if args.out is not None:
        (Path(args.out) / "fit_result.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_asvar(args) -> int:
    cfg = _read_config(args.config)
    model, truth = model_from_config(cfg["model"])
    aux, beta = aux_from_config(cfg["aux"])
    nu = args.lambda1 / (1.0 - args.lambda1)
    div = parse_divergence(args.divergence, nu=nu)
    rng = RngState(args.seed)
    sm = sandwich_matrices(
        model,
        aux,
        div,
        (truth, beta),
        args.lambda1,
        mc_draws=args.draws,
        rng=rng,
        backend=args.backend,
    )
    report = asvar(sm, scaled_by=args.scaled_by)
    payload = {
        "lambda1": args.lambda1,
        "divergence": args.divergence,
        "backend": args.backend,
        "scaled_by": args.scaled_by,
        "blocks": {
            "A": _matrix(sm.A),
            "B": _matrix(sm.B),
            "C": _matrix(sm.C),
            "G": _matrix(sm.G),
        },
        "asvar_nc": _matrix(report.asvar_nc),
        "asvar_pl": _matrix(report.asvar_pl),
        "reduction": _matrix(report.reduction),
        "eigen_diagnostics": {
            "min_eig_reduction": min_eigenvalue(report.reduction),
            "min_eig_C": min_eigenvalue(sm.C),
            "min_eig_minus_A": min_eigenvalue(-sm.A),
        },
    }
    if model.kind == "gauss1d" and args.backend == "quad":
        checks = special_case_identities(model, truth, args.lambda1, backend="quad")
        payload["identity_residuals"] = checks["residuals"]
    resolved = {
        "subcommand": "asvar",
        "config": cfg,
        "divergence": args.divergence,
        "lambda1": args.lambda1,
        "backend": args.backend,
        "draws": args.draws,
        "scaled_by": args.scaled_by,
        "seed": args.seed,
    }
    _echo_config(args.out, "asvar_config.json", resolved)
    if args.out is not None:
        (Path(args.out) / "asvar_result.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_experiment(args) -> int:
    plan = load_plan(args.plan)
    if args.full:
        plan = with_full_grid(plan)
    workers = args.workers
    env_workers = os.environ.get("NCE_LAB_WORKERS")
    if env_workers:
        workers = int(env_workers)
    table = run_mse_sweep(plan, workers=workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(args.out, "experiment_plan.json", plan.to_dict())
    written = emit_results(table, args.format, out_dir / f"mse_table.{args.format}")
    print(f"wrote {written}")
    cells = {}
    for row in table.rows:
        cells.setdefault((row.divergence, row.m), row.n_used)
    n_empty = sum(1 for used in cells.values() if used == 0)
    for row in table.rows:
        if row.component in ("c", "D"):
            print(
                f"  {row.divergence:>5s} m={row.m:<6d} {row.component}: "
                f"mse={row.mse:.6g} (used {row.n_used}, excluded {row.n_excluded})"
            )
    if n_empty:
        print(f"{n_empty} cell(s) lost every replication", file=sys.stderr)
        return 2
    return 0


def _cmd_validate(args) -> int:
    cfg = _read_config(args.config)
    model, truth = model_from_config(cfg["model"])
    checks = special_case_identities(model, truth, args.lambda1, backend="quad")
    worst = 0.0
    print(f"{'identity':<28s} residual")
    for name, residual in sorted(checks["residuals"].items()):
        print(f"{name:<28s} {residual:.3e}")
        worst = max(worst, residual)
    ok = worst <= IDENTITY_TOLERANCE
    print(f"worst residual {worst:.3e} ({'OK' if ok else 'FAIL'} at {IDENTITY_TOLERANCE:g})")
    _echo_config(args.out, "validate_config.json", {"subcommand": "validate", "config": cfg})
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nce-lab",
        description="Noise contrastive estimation for unnormalized models",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_fit = sub.add_parser("fit", help="draw a stratified sample and fit the model")
    p_fit.add_argument("--config", required=True, help="JSON with model and aux settings")
    p_fit.add_argument("--divergence", default="ojs", help="kl | chi2 | js | ojs | dpow:<beta>")
    p_fit.add_argument("--plugin", action="store_true", help="plug in the auxiliary MLE")
    p_fit.add_argument("--seed", type=int, default=0, help="seed for the sample stream")
    p_fit.add_argument("--m1", type=int, default=1000, help="data draws")
    p_fit.add_argument("--m2", type=int, default=2000, help="auxiliary draws")
    p_fit.add_argument("--out", default=None, help="directory for config echo and result")
    p_fit.set_defaults(func=_cmd_fit)

    p_as = sub.add_parser("asvar", help="asymptotic covariance blocks and diagnostics")
    p_as.add_argument("--config", required=True, help="JSON with model and aux settings")
    p_as.add_argument("--divergence", default="ojs", help="kl | chi2 | js | ojs | dpow:<beta>")
    p_as.add_argument("--lambda1", type=float, default=1.0 / 3.0, help="data fraction m1/m")
    p_as.add_argument("--backend", choices=("quad", "mc"), default="quad")
    p_as.add_argument("--draws", type=int, default=1_000_000, help="Monte Carlo draws")
    p_as.add_argument("--scaled-by", dest="scaled_by", choices=("m", "m1"), default="m")
    p_as.add_argument("--seed", type=int, default=0, help="seed for the MC backend")
    p_as.add_argument("--out", default=None, help="directory for config echo and result")
    p_as.set_defaults(func=_cmd_asvar)

    p_ex = sub.add_parser("experiment", help="run a replicated MSE sweep from a plan")
    p_ex.add_argument("--plan", required=True, help="experiment plan JSON")
    p_ex.add_argument("--out", required=True, help="output directory")
    p_ex.add_argument("--format", choices=("csv", "json", "svg"), default="csv")
    p_ex.add_argument("--full", action="store_true", help="use the full published grid")
    p_ex.add_argument("--workers", type=int, default=1, help="replication workers")
    p_ex.set_defaults(func=_cmd_experiment)

    p_val = sub.add_parser("validate", help="closed-form identity residuals")
    p_val.add_argument("--config", required=True, help="JSON with model settings")
    p_val.add_argument("--lambda1", type=float, default=1.0 / 3.0, help="data fraction m1/m")
    p_val.add_argument("--out", default=None, help="directory for config echo")
    p_val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console-script hook
    sys.exit(main())
