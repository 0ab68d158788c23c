"""Perturbation-bootstrap intervals and leave-one-study-out tuning."""

from __future__ import annotations

import math

import numpy as np
import pytest

from stablemeta import (
    RULE_MINIMISER,
    RULE_ONE_SE,
    EffectScale,
    Hyperparams,
    TargetProfile,
    TooFewTrials,
    TrialRecord,
    fit_amt,
    loso_select,
    make_dataset,
    perturbation_bootstrap,
)


def _linear_dataset(rng, k=10, gamma=0.0, noise=0.0):
    trials = []
    for i in range(k):
        x = float(rng.normal())
        a = float(rng.integers(0, 2))
        v = float(rng.uniform(0.2, 0.8))
        y = 0.3 - 0.5 * x + gamma * a + noise * rng.normal() * math.sqrt(v)
        trials.append(
            TrialRecord(
                id=f"t{i}", y=y, v=v, z=(1.0, x), a=(a,), regime=f"g{int(a)}"
            )
        )
    return make_dataset(trials, EffectScale.RISK_DIFFERENCE)


def _intercept_only(rng, k=6):
    trials = [
        TrialRecord(
            id=f"t{i}",
            y=float(rng.normal(0.2, 0.3)),
            v=float(rng.uniform(0.3, 1.0)),
            z=(1.0,),
            a=(),
            regime="g",
        )
        for i in range(k)
    ]
    return make_dataset(trials, EffectScale.RISK_DIFFERENCE)


TARGET2 = TargetProfile(z_bar=(1.0, 0.4))
TARGET1 = TargetProfile(z_bar=(1.0,))


def test_bootstrap_is_deterministic_in_the_seed():
    rng = np.random.default_rng(70)
    ds = _linear_dataset(rng, noise=0.5)
    hp = Hyperparams(rho=0.2)
    a = perturbation_bootstrap(ds, hp, TARGET2, b=25, seed=9)
    b = perturbation_bootstrap(ds, hp, TARGET2, b=25, seed=9)
    assert a == b
    c = perturbation_bootstrap(ds, hp, TARGET2, b=25, seed=10)
    assert (a.lo, a.hi) != (c.lo, c.hi)


def test_bootstrap_levels_nest():
    rng = np.random.default_rng(71)
    ds = _linear_dataset(rng, noise=0.5)
    hp = Hyperparams(rho=0.0)
    wide = perturbation_bootstrap(ds, hp, TARGET2, b=60, level=0.95, seed=4)
    narrow = perturbation_bootstrap(ds, hp, TARGET2, b=60, level=0.80, seed=4)
    assert wide.lo <= narrow.lo <= narrow.hi <= wide.hi
    assert wide.point == narrow.point
    assert wide.b_effective == 60


def test_bootstrap_width_tracks_trial_variances():
    rng = np.random.default_rng(72)
    trials = [
        TrialRecord(id=f"t{i}", y=0.1, v=1e-10, z=(1.0,), a=(), regime="g")
        for i in range(5)
    ]
    ds = make_dataset(trials, "rd")
    hp = Hyperparams(rho=0.0, lambda_r=0.0)
    res = perturbation_bootstrap(ds, hp, TARGET1, b=40, seed=1)
    assert res.hi - res.lo < 1e-4
    assert math.isclose(res.point, 0.1, abs_tol=1e-7)


def test_bootstrap_argument_validation():
    ds = _intercept_only(np.random.default_rng(73))
    hp = Hyperparams(rho=0.0)
    with pytest.raises(ValueError):
        perturbation_bootstrap(ds, hp, TARGET1, b=1)
    with pytest.raises(ValueError):
        perturbation_bootstrap(ds, hp, TARGET1, b=10, level=1.0)


def test_bootstrap_matches_normal_theory_on_intercept_only():
    # With q=0, rho=0, lambda_r=0 each refit is the closed-form
    # inverse-variance mean, so the bootstrap draws are exactly
    # Normal(theta_hat, 1/sum w) and the tails should land near the Wald
    # endpoints. Monte Carlo tolerance at B=300 is generous.
    rng = np.random.default_rng(74)
    ds = _intercept_only(rng, k=8)
    hp = Hyperparams(rho=0.0, lambda_r=0.0)
    res = perturbation_bootstrap(ds, hp, TARGET1, b=300, seed=5)
    w = ds.weights()
    theta = float(np.sum(w * ds.y) / np.sum(w))
    se = math.sqrt(1.0 / np.sum(w))
    assert math.isclose(res.point, theta, abs_tol=1e-9)
    assert abs(res.lo - (theta - 1.959963984540054 * se)) < 0.35 * se
    assert abs(res.hi - (theta + 1.959963984540054 * se)) < 0.35 * se


def test_bootstrap_with_reselection_runs():
    rng = np.random.default_rng(75)
    ds = _linear_dataset(rng, k=8, noise=0.3)
    hp = Hyperparams(rho=0.2)
    res = perturbation_bootstrap(
        ds,
        hp,
        TARGET2,
        b=3,
        seed=2,
        reselect=True,
        grid_rho=(0.0, 0.2),
        grid_lambda=(1.0,),
    )
    assert res.b_effective == 3
    assert res.lo <= res.hi


# ---------------------------------------------------------------------------
# Leave-one-study-out tuning
# ---------------------------------------------------------------------------


def test_loso_prefers_conservative_corner_on_clean_data():
    # Noiseless linear data with a null anchor: every grid point predicts
    # essentially perfectly, so the one-SE rule should fall back to the
    # smallest rho with the largest anchor penalty.
    rng = np.random.default_rng(80)
    ds = _linear_dataset(rng, k=9, gamma=0.0, noise=0.0)
    sel = loso_select(ds, seed=3)
    assert sel.rule == RULE_ONE_SE
    assert sel.rho_star == 0.0
    assert sel.lambda_gamma_star == 3.0
    assert len(sel.score_table) == 16


def test_loso_minimiser_rule():
    rng = np.random.default_rng(81)
    ds = _linear_dataset(rng, k=8, noise=0.4)
    sel = loso_select(
        ds, grid_rho=(0.0, 0.5), grid_lambda=(0.3, 1.0), one_se=False, seed=3
    )
    assert sel.rule == RULE_MINIMISER
    best = min(
        (e for e in sel.score_table if math.isfinite(e.score)),
        key=lambda e: e.score,
    )
    assert (sel.rho_star, sel.lambda_gamma_star) == (best.rho, best.lambda_gamma)


def test_loso_score_matches_manual_fold_loop():
    rng = np.random.default_rng(82)
    ds = _linear_dataset(rng, k=8, noise=0.4)
    hp = Hyperparams(rho=0.2, lambda_gamma=0.3)
    sel = loso_select(ds, grid_rho=(0.2,), grid_lambda=(0.3,), seed=0)
    entry = sel.score_table[0]

    errors = []
    for i in range(ds.k):
        fit = fit_amt(ds.without(i), hp)
        pred = float(np.dot(ds.z[i], fit.beta)) + float(
            np.dot(ds.a_raw[i], fit.gamma)
        )
        errors.append((ds.y[i] - pred) ** 2)
    want = float(np.quantile(np.asarray(errors), 0.90, method="linear"))
    assert math.isclose(entry.score, want, rel_tol=1e-9)
    assert entry.excluded_folds == 0
    assert entry.se > 0.0


def test_loso_too_few_trials_message():
    rng = np.random.default_rng(83)
    ds = _linear_dataset(rng, k=4)  # p + q + 2 = 5
    with pytest.raises(TooFewTrials) as exc:
        loso_select(ds)
    assert "hold the defaults fixed" in str(exc.value)


def test_loso_scores_do_not_depend_on_trial_order():
    rng = np.random.default_rng(84)
    ds = _linear_dataset(rng, k=8, noise=0.4)
    shuffled = ds.subset([5, 2, 7, 0, 3, 6, 1, 4])
    grid = dict(grid_rho=(0.0, 0.5), grid_lambda=(0.3, 1.0), seed=6)
    a = loso_select(ds, **grid)
    b = loso_select(shuffled, **grid)
    assert (a.rho_star, a.lambda_gamma_star) == (b.rho_star, b.lambda_gamma_star)
    for ea, eb in zip(a.score_table, b.score_table):
        assert (ea.rho, ea.lambda_gamma) == (eb.rho, eb.lambda_gamma)
        assert math.isclose(ea.score, eb.score, rel_tol=1e-7, abs_tol=1e-12)
        assert math.isclose(ea.se, eb.se, rel_tol=1e-5, abs_tol=1e-10)


def test_loso_rejects_empty_grid():
    rng = np.random.default_rng(85)
    ds = _linear_dataset(rng, k=8)
    with pytest.raises(ValueError):
        loso_select(ds, grid_rho=())
