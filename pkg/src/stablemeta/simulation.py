"""Deterministic simulation harness over six trial-landscape scenarios.

Aims: quantify how badly precision-weighted pooling is misled by
anchor-aligned instability (old-era shifts, dominant mega-trials,
anchor-confounded case mix) and whether the robust transported fit plus the
abstention rule recovers the target-profile effect.

Data generation: each replication draws a landscape of trials with a trial
year, era/region/endpoint anchors, case-mix covariates (age, diabetes
prevalence, high-statin share), a log-uniform trial size, and a
risk-difference effect built from a fixed covariate surface plus
scenario-specific anchor shifts. Estimands: the covariate surface evaluated
at a modern target profile. Methods: classical pooled estimators and the
robust fit across a grid of blend weights. Performance metrics: bias, RMSE,
MAE, sign error among non-abstained replications, Wald or bootstrap
coverage, decision regret with an abstention credit, mean sign-stability,
and the abstention rate.

Every random draw flows from a counter-style seed tuple
(base_seed, scenario index, replication, purpose), so any replication can be
regenerated in isolation and the output is independent of worker count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from multiprocessing import get_context
from pathlib import Path

import numpy as np

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
from .data import Dataset, EffectScale, TargetProfile, TrialRecord, make_dataset
from .diagnostics import abstention_rule
from .errors import StableMetaError
from .inference import perturbation_bootstrap
from .util import fmt_float

SCENARIO_NAMES = (
    "stable",
    "anchor_shift",
    "sign_flip",
    "target_shift",
    "dominant_megatrial",
    "confounded_anchor",
)

AMT_RHO_GRID = {
    "AMT_rho00": 0.0,
    "AMT_rho20": 0.2,
    "AMT_rho50": 0.5,
    "AMT_rho80": 0.8,
}

METHOD_ORDER = (
    METHOD_FE,
    METHOD_DL,
    METHOD_PM,
    METHOD_WLS,
    "AMT_rho00",
    "AMT_rho20",
    "AMT_rho50",
    "AMT_rho80",
)

COVERAGE_AMT_METHOD = "AMT_rho20"

_PURPOSE_DESIGN = 0
_PURPOSE_NOISE = 1
_PURPOSE_BOOTSTRAP = 2

Z_NAMES = ("intercept", "age", "diabetes", "statin_hi")
A_NAMES = ("era_old", "region_b", "endpoint_narrow")


def load_scenario_constants() -> dict:
    """Constants of the data-generating process as shipped with the package."""
    text = (
        resources.files("stablemeta")
        .joinpath("scenario_constants.json")
        .read_text()
    )
    return json.loads(text)


def scenario_constants_checksum() -> str:
    import hashlib

    data = (
        resources.files("stablemeta")
        .joinpath("scenario_constants.json")
        .read_bytes()
    )
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ScenarioConfig:
    """One scenario's data-generating constants."""

    name: str
    k_trials: int
    beta_true: tuple[float, ...]
    target: TargetProfile
    year_min: int
    year_max: int
    era_cutoff: int
    old_era_fraction: float
    age_mean: float
    age_sd: float
    diabetes_lo: float
    diabetes_hi: float
    statin_intercept: float
    statin_slope: float
    statin_span: float
    statin_noise_sd: float
    n_lo: float
    n_hi: float
    variance_numerator: float
    anchor_shift_delta: float
    sign_flip_shift: float
    shifted_age_mean: float
    shifted_diabetes_center: float
    shifted_statin_center: float
    shifted_statin_sd: float
    megatrial_n: int
    megatrial_era_delta: float
    confound_diabetes_shift: float
    confound_statin_shift: float
    confound_delta: float
    ambiguous_band: float
    decision_threshold: float

    @property
    def no_stable_target(self) -> bool:
        """sign_flip has opposite-signed regional effects, so the scalar
        truth is only the region-average surface."""
        return self.name == "sign_flip"

    @property
    def scenario_index(self) -> int:
        return SCENARIO_NAMES.index(self.name)


def scenario_config(
    name: str,
    k_trials: int | None = None,
    constants: dict | None = None,
) -> ScenarioConfig:
    if name not in SCENARIO_NAMES:
        raise ValueError(
            f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}"
        )
    c = dict(load_scenario_constants())
    if constants:
        c.update(constants)
    return ScenarioConfig(
        name=name,
        k_trials=int(k_trials if k_trials is not None else c["k_trials"]),
        beta_true=tuple(float(b) for b in c["beta_true"]),
        target=TargetProfile(tuple(float(z) for z in c["target_z"])),
        year_min=int(c["year_min"]),
        year_max=int(c["year_max"]),
        era_cutoff=int(c["era_cutoff"]),
        old_era_fraction=float(c["old_era_fraction"]),
        age_mean=float(c["age_mean"]),
        age_sd=float(c["age_sd"]),
        diabetes_lo=float(c["diabetes_lo"]),
        diabetes_hi=float(c["diabetes_hi"]),
        statin_intercept=float(c["statin_intercept"]),
        statin_slope=float(c["statin_slope"]),
        statin_span=float(c["statin_span"]),
        statin_noise_sd=float(c["statin_noise_sd"]),
        n_lo=float(c["n_lo"]),
        n_hi=float(c["n_hi"]),
        variance_numerator=float(c["variance_numerator"]),
        anchor_shift_delta=float(c["anchor_shift_delta"]),
        sign_flip_shift=float(c["sign_flip_shift"]),
        shifted_age_mean=float(c["shifted_age_mean"]),
        shifted_diabetes_center=float(c["shifted_diabetes_center"]),
        shifted_statin_center=float(c["shifted_statin_center"]),
        shifted_statin_sd=float(c["shifted_statin_sd"]),
        megatrial_n=int(c["megatrial_n"]),
        megatrial_era_delta=float(c["megatrial_era_delta"]),
        confound_diabetes_shift=float(c["confound_diabetes_shift"]),
        confound_statin_shift=float(c["confound_statin_shift"]),
        confound_delta=float(c["confound_delta"]),
        ambiguous_band=float(c["ambiguous_band"]),
        decision_threshold=float(c["decision_threshold"]),
    )


def _stream(base_seed: int, scenario_index: int, r: int, purpose: int):
    return np.random.default_rng(
        np.random.SeedSequence((int(base_seed), scenario_index, int(r), purpose))
    )


def generate_scenario(
    cfg: ScenarioConfig, base_seed: int, r: int
) -> tuple[Dataset, float]:
    """Generate one replication's dataset and the scalar truth.

    The truth is the covariate surface at the target profile for every
    scenario; for sign_flip the regional shifts average to the surface, and
    the no-stable-target flag on the config marks that convention.
    """
    design = _stream(base_seed, cfg.scenario_index, r, _PURPOSE_DESIGN)
    noise = _stream(base_seed, cfg.scenario_index, r, _PURPOSE_NOISE)
    k = cfg.k_trials

    n_old = int(round(cfg.old_era_fraction * k))
    old = np.zeros(k, dtype=bool)
    old[design.permutation(k)[:n_old]] = True

    year_old = design.integers(cfg.year_min, cfg.era_cutoff, size=k)
    year_new = design.integers(cfg.era_cutoff, cfg.year_max + 1, size=k)
    year = np.where(old, year_old, year_new).astype(float)

    region_b = design.integers(0, 2, size=k).astype(bool)
    endpoint_narrow = design.integers(0, 2, size=k).astype(bool)

    age = cfg.age_mean + cfg.age_sd * design.standard_normal(k)
    diabetes = design.uniform(cfg.diabetes_lo, cfg.diabetes_hi, size=k)
    statin_noise = design.standard_normal(k)
    n_trials = np.rint(
        np.exp(design.uniform(math.log(cfg.n_lo), math.log(cfg.n_hi), size=k))
    )

    def statin_from_year(yr, noise_z):
        raw = (
            cfg.statin_intercept
            + cfg.statin_slope * (yr - cfg.year_min) / cfg.statin_span
            + cfg.statin_noise_sd * noise_z
        )
        return np.clip(raw, 0.0, 1.0)

    statin = statin_from_year(year, statin_noise)

    if cfg.name == "target_shift":
        age = cfg.shifted_age_mean + cfg.age_sd * design.standard_normal(k)
        half_width = 0.5 * (cfg.diabetes_hi - cfg.diabetes_lo)
        diabetes = design.uniform(
            cfg.shifted_diabetes_center - half_width,
            cfg.shifted_diabetes_center + half_width,
            size=k,
        )
        statin = np.clip(
            cfg.shifted_statin_center
            + cfg.shifted_statin_sd * design.standard_normal(k),
            0.0,
            1.0,
        )
    elif cfg.name == "dominant_megatrial":
        old[0] = True
        year[0] = float(design.integers(cfg.year_min, cfg.era_cutoff))
        statin[0] = float(
            statin_from_year(np.array([year[0]]), design.standard_normal(1))[0]
        )
        n_trials[0] = cfg.megatrial_n
    elif cfg.name == "confounded_anchor":
        diabetes = diabetes + cfg.confound_diabetes_shift * old
        statin = np.clip(statin + cfg.confound_statin_shift * old, 0.0, 1.0)

    delta = np.zeros(k)
    if cfg.name == "anchor_shift":
        delta = cfg.anchor_shift_delta * old.astype(float)
    elif cfg.name == "sign_flip":
        delta = cfg.sign_flip_shift * region_b.astype(float)
    elif cfg.name == "dominant_megatrial":
        delta = cfg.megatrial_era_delta * old.astype(float)
    elif cfg.name == "confounded_anchor":
        delta = cfg.confound_delta * old.astype(float)

    z = np.column_stack([np.ones(k), age, diabetes, statin])
    beta = np.asarray(cfg.beta_true)
    theta_i = z @ beta + delta
    v = cfg.variance_numerator / n_trials
    y = theta_i + np.sqrt(v) * noise.standard_normal(k)

    records = []
    for i in range(k):
        era_s = "old" if old[i] else "new"
        region_s = "B" if region_b[i] else "A"
        endpoint_s = "narrow" if endpoint_narrow[i] else "broad"
        records.append(
            TrialRecord(
                id=f"{cfg.name}-r{r}-t{i:02d}",
                y=float(y[i]),
                v=float(v[i]),
                z=(1.0, float(age[i]), float(diabetes[i]), float(statin[i])),
                a=(float(old[i]), float(region_b[i]), float(endpoint_narrow[i])),
                regime=f"{era_s}|{region_s}|{endpoint_s}",
            )
        )
    ds = make_dataset(records, EffectScale.RISK_DIFFERENCE, Z_NAMES, A_NAMES)
    truth = float(np.asarray(cfg.target.z_bar) @ beta)
    return ds, truth


@dataclass(frozen=True)
class MethodOutcome:
    method: str
    estimate: float
    ci_lo: float
    ci_hi: float
    ss_trial: float
    abstain: bool | None
    error: str | None = None


@dataclass(frozen=True)
class ReplicationResult:
    scenario: str
    r: int
    truth: float
    no_stable_target: bool
    outcomes: tuple[MethodOutcome, ...]


def _amt_hyperparams(rho: float) -> Hyperparams:
    return Hyperparams(rho=rho, alpha=6.0, lambda_gamma=1.0, lambda_r=1e-6, delta=0.005)


def run_replication(
    cfg: ScenarioConfig,
    base_seed: int,
    r: int,
    methods=METHOD_ORDER,
) -> ReplicationResult:
    """One replication: generate data, apply every requested method.

    A method failure becomes a missing cell with an error tag, never an
    exception out of the replication.
    """
    ds, truth = generate_scenario(cfg, base_seed, r)
    outcomes = []
    for method in methods:
        try:
            if method == METHOD_FE:
                res = fixed_effect(ds)
                outcomes.append(
                    MethodOutcome(method, res.theta_hat, res.ci_lo, res.ci_hi,
                                  math.nan, None)
                )
            elif method == METHOD_DL:
                res = random_effects(ds, tau2_dersimonian_laird(ds), method=METHOD_DL)
                outcomes.append(
                    MethodOutcome(method, res.theta_hat, res.ci_lo, res.ci_hi,
                                  math.nan, None)
                )
            elif method == METHOD_PM:
                res = random_effects(ds, tau2_paule_mandel(ds), method=METHOD_PM)
                outcomes.append(
                    MethodOutcome(method, res.theta_hat, res.ci_lo, res.ci_hi,
                                  math.nan, None)
                )
            elif method == METHOD_WLS:
                res = wls_meta_regression(ds, cfg.target)
                outcomes.append(
                    MethodOutcome(method, res.theta_hat, res.ci_lo, res.ci_hi,
                                  math.nan, None)
                )
            elif method in AMT_RHO_GRID:
                hp = _amt_hyperparams(AMT_RHO_GRID[method])
                fit = fit_amt(ds, hp, cfg.target)
                theta = stable_target_effect(fit, cfg.target)
                abstain, _, ss, _, _ = abstention_rule(ds, theta, hp)
                outcomes.append(
                    MethodOutcome(
                        method,
                        theta,
                        math.nan,
                        math.nan,
                        math.nan if ss is None else ss,
                        abstain,
                    )
                )
            else:
                raise ValueError(f"unknown method {method!r}")
        except StableMetaError as exc:
            outcomes.append(
                MethodOutcome(
                    method, math.nan, math.nan, math.nan, math.nan, None,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return ReplicationResult(
        scenario=cfg.name,
        r=r,
        truth=truth,
        no_stable_target=cfg.no_stable_target,
        outcomes=tuple(outcomes),
    )


# ---------------------------------------------------------------------------
# Metric aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    method: str
    bias: float
    rmse: float
    mae: float
    type_s: float
    coverage: float
    regret_smart: float
    ss_trial_mean: float
    abstain_rate: float


METRICS_COLUMNS = (
    "scenario",
    "method",
    "bias",
    "rmse",
    "mae",
    "type_s",
    "coverage",
    "regret_smart",
    "ss_trial_mean",
    "abstain_rate",
)


def _regret(estimate: float, truth: float, abstained: bool,
            threshold: float, band: float) -> float:
    """Decision regret for a treat-if-below-threshold rule.

    A non-abstained analysis is charged 1 for landing on the wrong side of
    the threshold. An abstention is free when the truth is within the
    ambiguous band around zero and charged 1 otherwise.
    """
    if abstained:
        return 0.0 if abs(truth) < band else 1.0
    return 0.0 if (estimate < threshold) == (truth < threshold) else 1.0


def aggregate_metrics(
    results: list[ReplicationResult],
    ambiguous_band: float | None = None,
    decision_threshold: float | None = None,
) -> list[MetricsRow]:
    """Collapse replication rows into the per-(scenario, method) table.

    Rows appear in canonical scenario and method order. Missing cells
    (failed fits) are dropped metric-wise; sign error is computed among
    non-abstained replications only; ss_trial_mean averages the defined
    values.
    """
    constants = load_scenario_constants()
    if ambiguous_band is None:
        ambiguous_band = float(constants["ambiguous_band"])
    if decision_threshold is None:
        decision_threshold = float(constants["decision_threshold"])

    by_key: dict[tuple[str, str], list[tuple[MethodOutcome, float]]] = {}
    scenarios_seen = []
    for rep in results:
        if rep.scenario not in scenarios_seen:
            scenarios_seen.append(rep.scenario)
        for out in rep.outcomes:
            by_key.setdefault((rep.scenario, out.method), []).append((out, rep.truth))

    scenario_order = [s for s in SCENARIO_NAMES if s in scenarios_seen] + [
        s for s in scenarios_seen if s not in SCENARIO_NAMES
    ]
    methods_seen = {m for (_, m) in by_key}
    method_order = [m for m in METHOD_ORDER if m in methods_seen] + sorted(
        m for m in methods_seen if m not in METHOD_ORDER
    )

    rows = []
    for scenario in scenario_order:
        for method in method_order:
            cells = by_key.get((scenario, method))
            if not cells:
                continue
            est = np.array([o.estimate for o, _ in cells])
            truth = np.array([t for _, t in cells])
            ok = ~np.isnan(est)
            err = est[ok] - truth[ok]
            bias = float(err.mean()) if err.size else math.nan
            rmse = float(np.sqrt((err**2).mean())) if err.size else math.nan
            mae = float(np.abs(err).mean()) if err.size else math.nan

            abst = np.array(
                [bool(o.abstain) if o.abstain is not None else False for o, _ in cells]
            )
            active = ok & ~abst & (truth != 0.0)
            if active.any():
                type_s = float(
                    (np.sign(est[active]) != np.sign(truth[active])).mean()
                )
            else:
                type_s = math.nan

            lo = np.array([o.ci_lo for o, _ in cells])
            hi = np.array([o.ci_hi for o, _ in cells])
            has_ci = ~np.isnan(lo) & ~np.isnan(hi)
            if has_ci.any():
                coverage = float(
                    ((lo[has_ci] <= truth[has_ci]) & (truth[has_ci] <= hi[has_ci])).mean()
                )
            else:
                coverage = math.nan

            regrets = [
                _regret(o.estimate, t, bool(o.abstain), decision_threshold,
                        ambiguous_band)
                for o, t in cells
                if not (math.isnan(o.estimate) and not o.abstain)
            ]
            regret = float(np.mean(regrets)) if regrets else math.nan

            is_amt = any(o.abstain is not None for o, _ in cells)
            if is_amt:
                ss_vals = np.array([o.ss_trial for o, _ in cells])
                ss_mean = (
                    float(ss_vals[~np.isnan(ss_vals)].mean())
                    if (~np.isnan(ss_vals)).any()
                    else math.nan
                )
                abstain_rate = float(
                    np.mean([bool(o.abstain) for o, _ in cells if o.abstain is not None])
                )
            else:
                ss_mean = math.nan
                abstain_rate = math.nan

            rows.append(
                MetricsRow(
                    scenario=scenario,
                    method=method,
                    bias=bias,
                    rmse=rmse,
                    mae=mae,
                    type_s=type_s,
                    coverage=coverage,
                    regret_smart=regret,
                    ss_trial_mean=ss_mean,
                    abstain_rate=abstain_rate,
                )
            )
    return rows


def metrics_to_csv(rows: list[MetricsRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.scenario,
                    row.method,
                    fmt_float(row.bias),
                    fmt_float(row.rmse),
                    fmt_float(row.mae),
                    fmt_float(row.type_s),
                    fmt_float(row.coverage),
                    fmt_float(row.regret_smart),
                    fmt_float(row.ss_trial_mean),
                    fmt_float(row.abstain_rate),
                ]
            )


# ---------------------------------------------------------------------------
# Coverage sub-run (bootstrap intervals are too costly for the main grid)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageRow:
    scenario: str
    method: str
    coverage: float
    mean_width: float
    n_reps: int


COVERAGE_COLUMNS = ("scenario", "method", "coverage", "mean_width", "n_reps")

_COVERAGE_CLASSICAL = (METHOD_FE, METHOD_DL, METHOD_PM, METHOD_WLS)


def run_coverage_replication(
    cfg: ScenarioConfig, base_seed: int, r: int, b: int
) -> list[tuple[str, bool, float]]:
    """Interval cover/width rows for one replication.

    Classical methods use Wald intervals; the robust fit uses the
    perturbation bootstrap at fixed default tuning (rho = 0.2).
    """
    ds, truth = generate_scenario(cfg, base_seed, r)
    rows = []
    for method in _COVERAGE_CLASSICAL:
        try:
            if method == METHOD_FE:
                res = fixed_effect(ds)
            elif method == METHOD_DL:
                res = random_effects(ds, tau2_dersimonian_laird(ds), method=METHOD_DL)
            elif method == METHOD_PM:
                res = random_effects(ds, tau2_paule_mandel(ds), method=METHOD_PM)
            else:
                res = wls_meta_regression(ds, cfg.target)
            rows.append(
                (method, res.ci_lo <= truth <= res.ci_hi, res.ci_hi - res.ci_lo)
            )
        except StableMetaError:
            continue
    boot_seed = int(
        np.random.SeedSequence(
            (int(base_seed), cfg.scenario_index, int(r), _PURPOSE_BOOTSTRAP)
        ).generate_state(1)[0]
    )
    try:
        interval = perturbation_bootstrap(
            ds,
            _amt_hyperparams(AMT_RHO_GRID[COVERAGE_AMT_METHOD]),
            cfg.target,
            b=b,
            seed=boot_seed,
        )
        rows.append(
            (
                COVERAGE_AMT_METHOD,
                interval.lo <= truth <= interval.hi,
                interval.hi - interval.lo,
            )
        )
    except StableMetaError:
        pass
    return rows


def aggregate_coverage(
    scenario: str, rep_rows: list[list[tuple[str, bool, float]]]
) -> list[CoverageRow]:
    methods = list(_COVERAGE_CLASSICAL) + [COVERAGE_AMT_METHOD]
    out = []
    for method in methods:
        hits = []
        widths = []
        for rows in rep_rows:
            for m, covered, width in rows:
                if m == method:
                    hits.append(covered)
                    widths.append(width)
        if hits:
            out.append(
                CoverageRow(
                    scenario=scenario,
                    method=method,
                    coverage=float(np.mean(hits)),
                    mean_width=float(np.mean(widths)),
                    n_reps=len(hits),
                )
            )
    return out


def coverage_to_csv(rows: list[CoverageRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COVERAGE_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.scenario,
                    row.method,
                    fmt_float(row.coverage),
                    fmt_float(row.mean_width),
                    str(row.n_reps),
                ]
            )


# ---------------------------------------------------------------------------
# Batch runners (worker-count independent by construction)
# ---------------------------------------------------------------------------


def _main_task(args) -> ReplicationResult:
    scenario, k_trials, base_seed, r, methods, overrides = args
    cfg = scenario_config(scenario, k_trials=k_trials, constants=overrides)
    return run_replication(cfg, base_seed, r, methods)


def _coverage_task(args):
    scenario, k_trials, base_seed, r, b, overrides = args
    cfg = scenario_config(scenario, k_trials=k_trials, constants=overrides)
    return scenario, run_coverage_replication(cfg, base_seed, r, b)


def _run_tasks(task_fn, tasks, workers: int):
    if workers <= 1:
        return [task_fn(t) for t in tasks]
    ctx = get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        return pool.map(task_fn, tasks, chunksize=1)


def simulate_main(
    scenarios,
    reps: int,
    base_seed: int = 0,
    k_trials: int | None = None,
    methods=METHOD_ORDER,
    workers: int = 1,
    constants: dict | None = None,
) -> list[ReplicationResult]:
    """Run the main metric grid. Results are ordered by (scenario, r) and do
    not depend on the worker count."""
    tasks = [
        (scenario, k_trials, base_seed, r, tuple(methods), constants)
        for scenario in scenarios
        for r in range(reps)
    ]
    return _run_tasks(_main_task, tasks, workers)


def simulate_coverage(
    scenarios,
    reps: int,
    b: int,
    base_seed: int = 0,
    k_trials: int | None = None,
    workers: int = 1,
    constants: dict | None = None,
) -> list[CoverageRow]:
    """Run the interval-coverage sub-study and aggregate per scenario."""
    tasks = [
        (scenario, k_trials, base_seed, r, b, constants)
        for scenario in scenarios
        for r in range(reps)
    ]
    results = _run_tasks(_coverage_task, tasks, workers)
    rows: list[CoverageRow] = []
    for scenario in scenarios:
        rep_rows = [rr for s, rr in results if s == scenario]
        rows.extend(aggregate_coverage(scenario, rep_rows))
    return rows
