"""Command-line interface: ``dosecurve simulate | estimate | report``.

Exit status is 0 on success, 1 on invalid input and 2 when estimation fails.
"""

from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .crossfit import (
    ESTIMATORS,
    crossfit_curve,
    fit_nuisances,
    make_folds,
    multiplier_bootstrap_band,
    prepare_fitter,
    resolve_bandwidth,
)
from .data import DoseCurveError, EstimationConfig, EvalGrid, ValidationError
from .io import emit_report, load_csv, read_report, render_report
from .nuisance import BasisConfig
from .simulation import DgpSpec, EstimatorSpec, preset, run_monte_carlo

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=["epanechnikov", "gaussian", "triangular", "uniform"])
    p.add_argument("--bw-scale", type=float, help="C in h = C * sd(T) * n^(-1/5)")
    p.add_argument("--folds", type=int, help="cross-fitting folds (1 disables)")
    p.add_argument("--grid", help="evaluation grid lo:hi:count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.05, help="tau; intervals have level 1 - tau")
    p.add_argument("--no-self-normalize", action="store_true")
    p.add_argument("--outcome-model", choices=["poly", "zero", "oracle"])
    p.add_argument("--t-degree", type=int)
    p.add_argument("--s-degree", type=int)
    p.add_argument("--interactions", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--density", choices=["kde_residual", "rks", "oracle", "constant"])
    p.add_argument("--multiplier", type=float, default=0.5, help="level-set multiplier for zeta")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dosecurve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte-Carlo study on a built-in design")
    sim.add_argument("--dgp", choices=["dgp1", "dgp2"], default="dgp1")
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--d", type=int, default=5)
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--estimators", default="theta_dr", help="comma-separated estimator tags")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--strict", action="store_true", help="abort on the first failed replication")
    _add_common(sim)

    est = sub.add_parser("estimate", help="estimate a curve from a CSV file")
    est.add_argument("--data", required=True)
    est.add_argument("--outcome", required=True)
    est.add_argument("--treatment", required=True)
    est.add_argument("--covariates", required=True, help="comma-separated column names")
    est.add_argument("--standardize", action="store_true")
    est.add_argument("--method", help=f"one of {', '.join(ESTIMATORS)}")
    est.add_argument("--no-positivity", action="store_true",
                     help="use the bias-corrected estimators (default method theta_c_dr)")
    est.add_argument("--band", type=int, default=0, metavar="B",
                     help="add a uniform band from B multiplier-bootstrap replicates")
    _add_common(est)

    rep = sub.add_parser("report", help="combine earlier simulate/estimate outputs")
    rep.add_argument("inputs", nargs="+")
    rep.add_argument("--out")
    rep.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def _config(args, base: EstimationConfig) -> EstimationConfig:
    changes = {"rng_seed": args.seed, "ci_level": args.level, "level_multiplier": args.multiplier}
    if args.kernel:
        changes["kernel"] = args.kernel
    if args.bw_scale is not None:
        changes["bw_scale"] = args.bw_scale
    if args.folds is not None:
        changes["folds"] = args.folds
    if args.no_self_normalize:
        changes["self_normalized"] = False
    return base.evolve(**changes)


def _fitter(args, base):
    basis = base.basis
    if args.t_degree is not None or args.s_degree is not None or args.interactions is not None:
        basis = BasisConfig(
            basis.t_degree if args.t_degree is None else args.t_degree,
            basis.s_degree if args.s_degree is None else args.s_degree,
            basis.interactions if args.interactions is None else args.interactions,
        )
    changes = {"basis": basis}
    if args.outcome_model:
        changes["outcome"] = args.outcome_model
    if args.density:
        changes["density"] = args.density
    return replace(base, **changes)


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    cfg, fit = preset(args.dgp)
    cfg = _config(args, cfg).evolve(strict=args.strict)
    fit = _fitter(args, fit)
    grid = EvalGrid.parse(args.grid) if args.grid else EvalGrid.default()
    dgp = DgpSpec(args.dgp, args.n, args.d, args.seed)
    tags = [t.strip() for t in args.estimators.split(",") if t.strip()]
    for t in tags:
        if t not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {t!r}; choose from {ESTIMATORS}")
    reports = run_monte_carlo(dgp, [EstimatorSpec(t, fit) for t in tags], cfg, grid, args.reps,
                              workers=args.workers)
    _write(render_report(reports, args.format), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
    data = load_csv(args.data, args.outcome, args.treatment, covs, args.standardize)
    base_cfg = EstimationConfig()
    _, fit = preset("dgp1")
    fit = replace(fit, basis=BasisConfig(2, 1, True))
    if args.no_positivity:
        fit = replace(fit, density_kernel="gaussian")
    cfg = _config(args, base_cfg)
    fit = _fitter(args, fit)
    if fit.outcome == "oracle" or fit.density == "oracle":
        raise ValidationError("oracle nuisances are only available in simulate")
    method = args.method or ("theta_c_dr" if args.no_positivity else "theta_dr")
    if args.grid:
        grid = EvalGrid.parse(args.grid)
    else:
        lo, hi = np.quantile(data.t, [0.05, 0.95])
        grid = EvalGrid.linspace(float(lo), float(hi), 41)
    folds = make_folds(data.n, cfg.folds, cfg.rng_seed)
    h = resolve_bandwidth(data, cfg)
    extra = {"data": str(args.data), "outcome": args.outcome, "treatment": args.treatment,
             "covariates": covs, "standardize": args.standardize, "config": cfg.as_dict()}
    if args.band:
        fit = prepare_fitter(method, fit)
        nuisance = fit_nuisances(data, fit, folds)
        band = multiplier_bootstrap_band(data, nuisance, cfg, grid, args.band, h=h, folds=folds,
                                         estimator=method)
        _write(render_report(band, args.format, extra), args.out)
    else:
        curve = crossfit_curve(data, cfg, method, grid, fit, h=h, folds=folds)
        _write(render_report(curve, args.format, extra), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    """Stack rows from several outputs and summarise each estimator."""
    columns: Optional[list[str]] = None
    rows: list[list] = []
    for path in args.inputs:
        cols, rs = read_report(path)
        if columns is None:
            columns = cols
        elif cols != columns:
            raise ValidationError(f"{path} has columns {cols}, expected {columns}")
        rows.extend(rs)
    assert columns is not None
    groups: dict[str, list[list]] = defaultdict(list)
    for r in rows:
        groups[r[0]].append(r)
    out_cols = ["estimator", "points", "mean_estimate", "mean_ci_width"]
    has_sim = "bias" in columns
    if has_sim:
        out_cols += ["mean_abs_bias", "mean_rmse", "mean_coverage"]
    summary = []
    for name in sorted(groups):
        g = np.array([r[1:] for r in groups[name]], dtype=float)
        col = {c: g[:, i] for i, c in enumerate(columns[1:])}
        line = [name, float(len(g)), np.nanmean(col["estimate"]),
                np.nanmean(col["ci_hi"] - col["ci_lo"])]
        if has_sim:
            line += [np.nanmean(np.abs(col["bias"])), np.nanmean(col["rmse"]),
                     np.nanmean(col["coverage"])]
        summary.append(line)
    text = _summary_text(out_cols, summary, args.format, list(args.inputs))
    _write(text, args.out)
    return EXIT_OK


def _summary_text(cols, rows, fmt, inputs) -> str:
    import csv
    import io
    import json

    if fmt == "json":
        clean = [[r[0], *(None if not np.isfinite(v) else float(v) for v in r[1:])] for r in rows]
        doc = {"kind": "summary", "columns": cols, "rows": clean, "config": {"inputs": inputs}}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[0], *("" if not np.isfinite(v) else repr(float(v)) for v in r[1:])])
    return buf.getvalue()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    handler = {"simulate": cmd_simulate, "estimate": cmd_estimate, "report": cmd_report}
    try:
        return handler[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DoseCurveError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
