"""Uncertainty and tuning: perturbation bootstrap, leave-one-study-out grid.

The perturbation bootstrap redraws each trial effect from a normal centred
at the observed effect with the trial's own variance, refits the whole
pipeline per replicate, and reads confidence limits off the replicate
quantiles. Tuning scores a (rho, lambda_gamma) grid by the 0.90 quantile of
held-out squared prediction errors using the full linear predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .amt import AmtFitResult, Hyperparams, fit_amt, stable_target_effect
from .data import Dataset, TargetProfile
from .errors import StableMetaError, TooFewTrials
from .util import quantile

BOOTSTRAP_METHOD = "perturbation_bootstrap"

RULE_MINIMISER = "minimiser"
RULE_ONE_SE = "one_se"

DEFAULT_RHO_GRID = (0.0, 0.2, 0.5, 0.8)
DEFAULT_LAMBDA_GRID = (0.1, 0.3, 1.0, 3.0)


@dataclass(frozen=True)
class IntervalEstimate:
    """Point estimate with a bootstrap interval."""

    point: float
    lo: float
    hi: float
    level: float
    method: str
    b_effective: int


@dataclass(frozen=True)
class ScoreEntry:
    """One grid point of the tuning table."""

    rho: float
    lambda_gamma: float
    score: float
    se: float
    excluded_folds: int


@dataclass(frozen=True)
class TuningSelection:
    rho_star: float
    lambda_gamma_star: float
    rule: str
    score_table: tuple[ScoreEntry, ...]


def perturbation_bootstrap(
    ds: Dataset,
    hp: Hyperparams,
    target: TargetProfile,
    b: int,
    level: float = 0.95,
    seed: int = 0,
    reselect: bool = False,
    grid_rho=DEFAULT_RHO_GRID,
    grid_lambda=DEFAULT_LAMBDA_GRID,
) -> IntervalEstimate:
    """Perturbation-bootstrap interval for the transported target effect.

    Replicate b redraws y_i ~ Normal(y_i, v_i) with an RNG stream spawned
    from the master seed by replicate index, so execution order cannot
    change the result. Each replicate refits from scratch (the softmax scale
    constant is recomputed per replicate); with ``reselect`` the grid search
    reruns inside every replicate as well. Non-converged replicate fits
    still contribute their best iterate; replicates are dropped only when
    fitting raises, and the count kept is reported as ``b_effective``.
    """
    if b < 2:
        raise ValueError(f"bootstrap needs at least 2 replicates, got {b}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")

    master = np.random.SeedSequence(seed)
    children = master.spawn(b)

    hp_point = hp
    if reselect:
        sel = loso_select(
            ds,
            grid_rho=grid_rho,
            grid_lambda=grid_lambda,
            hp_base=hp,
            seed=seed,
        )
        hp_point = _with_selection(hp, sel)
    fit = fit_amt(ds, hp_point, target)
    point = stable_target_effect(fit, target)

    sd = np.sqrt(ds.v)
    estimates = []
    last_error: StableMetaError | None = None
    for child in children:
        noise_ss, tune_ss = child.spawn(2)
        rng = np.random.default_rng(noise_ss)
        y_b = ds.y + sd * rng.standard_normal(ds.k)
        try:
            ds_b = ds.with_y(y_b)
            hp_b = hp
            if reselect:
                sel_b = loso_select(
                    ds_b,
                    grid_rho=grid_rho,
                    grid_lambda=grid_lambda,
                    hp_base=hp,
                    seed=int(tune_ss.generate_state(1)[0]),
                )
                hp_b = _with_selection(hp, sel_b)
            fit_b = fit_amt(ds_b, hp_b, target)
            estimates.append(stable_target_effect(fit_b, target))
        except StableMetaError as exc:
            last_error = exc
    if not estimates:
        raise last_error if last_error is not None else StableMetaError(
            "all bootstrap replicates failed"
        )

    tail = (1.0 - level) / 2.0
    lo = quantile(estimates, tail)
    hi = quantile(estimates, 1.0 - tail)
    return IntervalEstimate(
        point=point,
        lo=lo,
        hi=hi,
        level=level,
        method=BOOTSTRAP_METHOD,
        b_effective=len(estimates),
    )


def _with_selection(hp: Hyperparams, sel: TuningSelection) -> Hyperparams:
    return Hyperparams(
        rho=sel.rho_star,
        alpha=hp.alpha,
        lambda_gamma=sel.lambda_gamma_star,
        lambda_r=hp.lambda_r,
        delta=hp.delta,
        tau_threshold=hp.tau_threshold,
        minority_frac=hp.minority_frac,
    )


def _holdout_errors(
    ds: Dataset, hp: Hyperparams
) -> tuple[np.ndarray, int]:
    """Squared held-out prediction errors for one hyperparameter setting.

    Each trial in turn is dropped, the model refits on the remainder, and
    the held-out trial is predicted with the full linear predictor
    z' beta + a' gamma (raw anchor coding). Folds whose fit fails are
    excluded and counted.
    """
    errors = []
    excluded = 0
    for i in range(ds.k):
        try:
            sub = ds.without(i)
            fit = fit_amt(sub, hp)
            pred = float(np.dot(ds.z[i], fit.beta))
            if ds.q:
                pred += float(np.dot(ds.a_raw[i], fit.gamma))
            errors.append((ds.y[i] - pred) ** 2)
        except StableMetaError:
            excluded += 1
    return np.asarray(errors, dtype=float), excluded


def loso_select(
    ds: Dataset,
    grid_rho=DEFAULT_RHO_GRID,
    grid_lambda=DEFAULT_LAMBDA_GRID,
    hp_base: Hyperparams | None = None,
    score_quantile: float = 0.90,
    one_se: bool = True,
    resamples: int = 200,
    seed: int = 0,
) -> TuningSelection:
    """Leave-one-study-out selection of (rho, lambda_gamma).

    The per-grid-point score is the ``score_quantile`` of held-out squared
    errors; its standard error comes from resampling the error vector with
    replacement. Under the one-standard-error rule, among grid points whose
    score is within one SE of the best score the smallest rho wins, with the
    largest lambda_gamma as the tie-break; otherwise the plain minimiser is
    returned (same tie-break among exact ties).
    """
    if hp_base is None:
        hp_base = Hyperparams()
    grid_rho = tuple(float(r) for r in grid_rho)
    grid_lambda = tuple(float(l) for l in grid_lambda)
    if not grid_rho or not grid_lambda:
        raise ValueError("tuning grids must be non-empty")
    min_k = ds.p + ds.q + 2
    if ds.k < min_k:
        raise TooFewTrials(
            f"leave-one-study-out tuning needs at least p+q+2={min_k} trials, "
            f"got k={ds.k}; hold the defaults fixed for analyses this small"
        )

    entries: list[ScoreEntry] = []
    gp_index = 0
    for rho in grid_rho:
        for lam in grid_lambda:
            hp = Hyperparams(
                rho=rho,
                alpha=hp_base.alpha,
                lambda_gamma=lam,
                lambda_r=hp_base.lambda_r,
                delta=hp_base.delta,
                tau_threshold=hp_base.tau_threshold,
                minority_frac=hp_base.minority_frac,
            )
            errors, excluded = _holdout_errors(ds, hp)
            if errors.size == 0:
                score = math.inf
                se = math.inf
            else:
                score = quantile(errors, score_quantile)
                # Resample the sorted error vector so the SE, like the score,
                # cannot depend on trial ordering.
                rng = np.random.default_rng(
                    np.random.SeedSequence((int(seed), gp_index))
                )
                pool = np.sort(errors)
                draws = rng.integers(0, pool.size, size=(resamples, pool.size))
                resampled = np.quantile(
                    pool[draws], score_quantile, axis=1, method="linear"
                )
                se = float(np.std(resampled, ddof=1))
            entries.append(
                ScoreEntry(
                    rho=rho,
                    lambda_gamma=lam,
                    score=float(score),
                    se=se,
                    excluded_folds=excluded,
                )
            )
            gp_index += 1

    finite = [e for e in entries if math.isfinite(e.score)]
    if not finite:
        raise StableMetaError("every tuning fold failed on every grid point")
    best = min(finite, key=lambda e: e.score)

    if one_se:
        threshold = best.score + best.se
        candidates = [e for e in finite if e.score <= threshold]
        rule = RULE_ONE_SE
    else:
        candidates = [e for e in finite if e.score == best.score]
        rule = RULE_MINIMISER
    chosen = min(candidates, key=lambda e: (e.rho, -e.lambda_gamma))
    return TuningSelection(
        rho_star=chosen.rho,
        lambda_gamma_star=chosen.lambda_gamma,
        rule=rule,
        score_table=tuple(entries),
    )
