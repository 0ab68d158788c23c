"""Command-line front end: fit, tune, and simulate subcommands.

Every run writes its outputs under the required --out directory together
with a manifest (command, resolved configuration, seed, constants checksum,
package version, wall-clock duration). Validation failures exit with status
2 after printing a machine-readable error JSON to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .amt import Hyperparams, fit_amt, stable_target_effect
from .classical import (
    METHOD_DL,
    METHOD_FE,
    METHOD_PM,
    METHOD_WLS,
    fixed_effect,
    random_effects,
    tau2_dersimonian_laird,
    tau2_paule_mandel,
    wls_meta_regression,
)
from .data import EffectScale, TargetProfile, read_dataset_csv
from .diagnostics import run_diagnostics
from .errors import StableMetaError
from .inference import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_RHO_GRID,
    loso_select,
    perturbation_bootstrap,
)
from .simulation import (
    METHOD_ORDER,
    SCENARIO_NAMES,
    aggregate_metrics,
    coverage_to_csv,
    load_scenario_constants,
    metrics_to_csv,
    scenario_constants_checksum,
    simulate_coverage,
    simulate_main,
)
from .util import fmt_float, normal_critical, sha256_of_file

WORKERS_ENV = "STABLEMETA_WORKERS"


def _jsonable(value):
    """Recursively map NaN to null so the output stays strict JSON."""
    if isinstance(value, float):
        return None if math.isnan(value) else value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n")


def _manifest(command: str, config: dict, seed: int, started: float,
              extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifact_version": __version__,
        "duration_seconds": time.monotonic() - started,
    }
    if extra:
        manifest.update(extra)
    return manifest


def _parse_target(text: str) -> TargetProfile:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError:
        payload = json.loads(Path(text).read_text())
    if isinstance(payload, dict):
        z_bar = payload["z_bar"]
    else:
        z_bar = payload
    return TargetProfile(tuple(float(x) for x in z_bar))


def _default_workers() -> int:
    env = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _classical_block(ds, target, level):
    rows = []
    fe = fixed_effect(ds, level)
    rows.append(fe)
    if ds.k >= 2:
        rows.append(random_effects(ds, tau2_dersimonian_laird(ds), level, METHOD_DL))
        rows.append(random_effects(ds, tau2_paule_mandel(ds), level, METHOD_PM))
    try:
        rows.append(wls_meta_regression(ds, target, level))
    except StableMetaError:
        pass
    return rows


def _forest_csv(path: Path, ds, classical_rows, amt_row, level) -> None:
    crit = normal_critical(level)
    w = ds.weights()
    wsum = float(w.sum())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["row_type", "label", "estimate", "ci_lo", "ci_hi", "weight_pct"]
        )
        for t, wi in zip(ds.trials, w):
            half = crit * math.sqrt(t.v)
            writer.writerow(
                [
                    "trial",
                    t.id,
                    fmt_float(t.y),
                    fmt_float(t.y - half),
                    fmt_float(t.y + half),
                    fmt_float(100.0 * wi / wsum),
                ]
            )
        for res in classical_rows:
            writer.writerow(
                [
                    "summary",
                    res.method,
                    fmt_float(res.theta_hat),
                    fmt_float(res.ci_lo),
                    fmt_float(res.ci_hi),
                    "",
                ]
            )
        writer.writerow(
            [
                "summary",
                amt_row["method"],
                fmt_float(amt_row["estimate"]),
                fmt_float(amt_row["ci_lo"]),
                fmt_float(amt_row["ci_hi"]),
                "",
            ]
        )


def cmd_fit(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out)
    scale = EffectScale(args.scale)
    ds = read_dataset_csv(args.data, scale, continuity_correction=args.cc)
    target = _parse_target(args.target)

    overrides = {}
    for name in ("rho", "alpha", "lambda_gamma", "lambda_r", "delta"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    hp = Hyperparams.for_scale(scale, **overrides)

    reselected = None
    if args.reselect:
        selection = loso_select(ds, hp_base=hp, seed=args.seed)
        hp = Hyperparams.for_scale(
            scale,
            rho=selection.rho_star,
            lambda_gamma=selection.lambda_gamma_star,
            alpha=hp.alpha,
            lambda_r=hp.lambda_r,
            delta=hp.delta,
        )
        reselected = {
            "rho": selection.rho_star,
            "lambda_gamma": selection.lambda_gamma_star,
            "rule": selection.rule,
        }

    fit = fit_amt(ds, hp, target)
    theta = stable_target_effect(fit, target)
    diag = run_diagnostics(ds, theta, target, hp)

    interval = None
    if args.bootstrap > 0:
        interval = perturbation_bootstrap(
            ds, hp, target, b=args.bootstrap, level=args.level, seed=args.seed,
            reselect=args.reselect,
        )

    classical_rows = _classical_block(ds, target, args.level)

    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "data": str(args.data),
        "scale": scale.value,
        "target": list(target.z_bar),
        "hyperparams": {
            "rho": hp.rho,
            "alpha": hp.alpha,
            "lambda_gamma": hp.lambda_gamma,
            "lambda_r": hp.lambda_r,
            "delta": hp.delta,
            "tau_threshold": hp.tau_threshold,
            "minority_frac": hp.minority_frac,
        },
        "bootstrap": args.bootstrap,
        "reselect": bool(args.reselect),
        "level": args.level,
        "continuity_correction": bool(args.cc),
    }
    result = {
        "classical": [
            {
                "method": r.method,
                "theta": r.theta_hat,
                "se": r.se,
                "ci_lo": r.ci_lo,
                "ci_hi": r.ci_hi,
                "tau2": r.tau2,
                "q_stat": r.q_stat,
                "level": r.level,
                "beta": list(r.beta) if r.beta is not None else None,
            }
            for r in classical_rows
        ],
        "amt": {
            "method": "AMT",
            "beta": list(fit.beta),
            "gamma": list(fit.gamma),
            "anchor_names": list(ds.a_names),
            "z_names": list(ds.z_names),
            "theta_target": theta,
            "scale_s": fit.scale_s,
            "regime_losses": dict(zip(ds.regimes, fit.regime_losses)),
            "objective_value": fit.objective_value,
            "converged": fit.converged,
            "n_iterations": list(fit.n_iterations),
            "reselected": reselected,
            "interval": None
            if interval is None
            else {
                "lo": interval.lo,
                "hi": interval.hi,
                "level": interval.level,
                "method": interval.method,
                "b_effective": interval.b_effective,
            },
        },
        "diagnostics": {
            "ss_trial": diag.ss_trial,
            "abstain": diag.abstain,
            "abstain_reason": diag.abstain_reason.value,
            "informative_weight_pos": diag.informative_weight_pos,
            "informative_weight_neg": diag.informative_weight_neg,
            "regime_effects": [
                {
                    "regime": e.regime,
                    "theta": e.theta,
                    "method": e.method,
                    "n_trials": e.n_trials,
                }
                for e in diag.regime_effects
            ],
        },
        "manifest": _manifest(
            "fit", config, args.seed, started,
            {"input_sha256": sha256_of_file(args.data)},
        ),
    }
    _write_json(out_dir / "result.json", result)
    amt_forest = {
        "method": "AMT",
        "estimate": theta,
        "ci_lo": interval.lo if interval else math.nan,
        "ci_hi": interval.hi if interval else math.nan,
    }
    _forest_csv(out_dir / "forest.csv", ds, classical_rows, amt_forest, args.level)
    print(json.dumps(_jsonable({
        "theta_target": theta,
        "abstain": diag.abstain,
        "out": str(out_dir),
    })))
    return 0


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------


def cmd_tune(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out)
    scale = EffectScale(args.scale)
    ds = read_dataset_csv(args.data, scale, continuity_correction=args.cc)
    hp_base = Hyperparams.for_scale(scale)

    if args.grid == "custom":
        grid_rho = tuple(float(x) for x in args.rho_grid.split(","))
        grid_lambda = tuple(float(x) for x in args.lambda_grid.split(","))
    else:
        grid_rho = DEFAULT_RHO_GRID
        grid_lambda = DEFAULT_LAMBDA_GRID

    selection = loso_select(
        ds,
        grid_rho=grid_rho,
        grid_lambda=grid_lambda,
        hp_base=hp_base,
        score_quantile=args.quantile,
        one_se=args.one_se,
        resamples=args.resamples,
        seed=args.seed,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "data": str(args.data),
        "scale": scale.value,
        "grid": args.grid,
        "grid_rho": list(grid_rho),
        "grid_lambda": list(grid_lambda),
        "quantile": args.quantile,
        "one_se": bool(args.one_se),
        "resamples": args.resamples,
    }
    payload = {
        "selection": {
            "rho": selection.rho_star,
            "lambda_gamma": selection.lambda_gamma_star,
            "rule": selection.rule,
        },
        "score_table": [
            {
                "rho": e.rho,
                "lambda_gamma": e.lambda_gamma,
                "score": e.score if math.isfinite(e.score) else None,
                "se": e.se if math.isfinite(e.se) else None,
                "excluded_folds": e.excluded_folds,
            }
            for e in selection.score_table
        ],
        "manifest": _manifest(
            "tune", config, args.seed, started,
            {"input_sha256": sha256_of_file(args.data)},
        ),
    }
    _write_json(out_dir / "tuning.json", payload)
    print(json.dumps({
        "rho": selection.rho_star,
        "lambda_gamma": selection.lambda_gamma_star,
        "out": str(out_dir),
    }))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out)
    if args.scenario == "all":
        scenarios = list(SCENARIO_NAMES)
    else:
        scenarios = [s.strip() for s in args.scenario.split(",") if s.strip()]
        unknown = [s for s in scenarios if s not in SCENARIO_NAMES]
        if unknown:
            raise StableMetaError(
                f"unknown scenario(s) {unknown}; expected from {list(SCENARIO_NAMES)}"
            )

    workers = args.workers if args.workers is not None else _default_workers()

    results = simulate_main(
        scenarios,
        reps=args.reps,
        base_seed=args.seed,
        k_trials=args.trials,
        methods=METHOD_ORDER,
        workers=workers,
    )
    rows = aggregate_metrics(results)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_to_csv(rows, out_dir / "metrics.csv")

    if args.raw:
        with (out_dir / "replications.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["scenario", "r", "method", "estimate", "ci_lo", "ci_hi",
                 "ss_trial", "abstain", "truth", "error"]
            )
            for rep in results:
                for o in rep.outcomes:
                    writer.writerow(
                        [
                            rep.scenario,
                            str(rep.r),
                            o.method,
                            fmt_float(o.estimate),
                            fmt_float(o.ci_lo),
                            fmt_float(o.ci_hi),
                            fmt_float(o.ss_trial),
                            "" if o.abstain is None else str(o.abstain).lower(),
                            fmt_float(rep.truth),
                            o.error or "",
                        ]
                    )

    if args.coverage:
        coverage_rows = simulate_coverage(
            scenarios,
            reps=args.coverage_reps,
            b=args.coverage_boot,
            base_seed=args.seed,
            k_trials=args.trials,
            workers=workers,
        )
        coverage_to_csv(coverage_rows, out_dir / "coverage.csv")

    config = {
        "scenario": scenarios,
        "reps": args.reps,
        "trials": args.trials,
        "coverage": bool(args.coverage),
        "coverage_reps": args.coverage_reps,
        "coverage_boot": args.coverage_boot,
        "workers": workers,
        "raw": bool(args.raw),
        "scenario_constants": load_scenario_constants(),
    }
    manifest = _manifest(
        "simulate", config, args.seed, started,
        {"scenario_constants_sha256": scenario_constants_checksum()},
    )
    _write_json(out_dir / "manifest.json", manifest)
    print(json.dumps({"out": str(out_dir), "rows": len(rows)}))
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablemeta",
        description=(
            "Meta-analysis with regime-robust anchor adjustment, "
            "sign-stability diagnostics, and a reproducible simulation harness."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one dataset and report all estimators")
    fit.add_argument("--data", required=True, help="trial CSV path")
    fit.add_argument("--target", required=True,
                     help="JSON target profile ('{\"z_bar\": [1, ...]}' or a path)")
    fit.add_argument("--scale", choices=[s.value for s in EffectScale],
                     default="rd", help="effect scale of the data")
    fit.add_argument("--cc", action="store_true",
                     help="0.5 continuity correction for zero cells")
    fit.add_argument("--rho", type=float, default=None)
    fit.add_argument("--alpha", type=float, default=None)
    fit.add_argument("--lambda-gamma", dest="lambda_gamma", type=float, default=None)
    fit.add_argument("--lambda-r", dest="lambda_r", type=float, default=None)
    fit.add_argument("--delta", type=float, default=None)
    fit.add_argument("--bootstrap", type=int, default=0,
                     help="perturbation bootstrap replicates (0 disables)")
    fit.add_argument("--reselect", action="store_true",
                     help="rerun grid tuning inside each bootstrap replicate")
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="output directory")
    fit.set_defaults(func=cmd_fit)

    tune = sub.add_parser("tune", help="leave-one-study-out hyperparameter search")
    tune.add_argument("--data", required=True)
    tune.add_argument("--scale", choices=[s.value for s in EffectScale], default="rd")
    tune.add_argument("--cc", action="store_true")
    tune.add_argument("--grid", choices=["default", "custom"], default="default")
    tune.add_argument("--rho-grid", dest="rho_grid", default="0,0.2,0.5,0.8",
                      help="comma list, used with --grid custom")
    tune.add_argument("--lambda-grid", dest="lambda_grid", default="0.1,0.3,1,3",
                      help="comma list, used with --grid custom")
    tune.add_argument("--quantile", type=float, default=0.90)
    tune.add_argument("--one-se", dest="one_se",
                      action=argparse.BooleanOptionalAction, default=True)
    tune.add_argument("--resamples", type=int, default=200)
    tune.add_argument("--seed", type=int, default=0)
    tune.add_argument("--out", required=True)
    tune.set_defaults(func=cmd_tune)

    sim = sub.add_parser("simulate", help="run the scenario grid")
    sim.add_argument("--scenario", default="all",
                     help="comma-separated scenario names or 'all'")
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--trials", type=int, default=None,
                     help="trials per replication (default from constants file)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--coverage", action="store_true",
                     help="also run the interval-coverage sub-study")
    sim.add_argument("--coverage-reps", dest="coverage_reps", type=int, default=100)
    sim.add_argument("--coverage-boot", dest="coverage_boot", type=int, default=30)
    sim.add_argument("--workers", type=int, default=None,
                     help=f"worker processes (default ${WORKERS_ENV} or 1)")
    sim.add_argument("--raw", action="store_true",
                     help="also write per-replication rows")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StableMetaError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(
            json.dumps(
                {"error": {"type": type(exc).__name__, "message": str(exc)}}
            )
        )
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
