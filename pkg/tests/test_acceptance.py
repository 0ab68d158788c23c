"""Acceptance gate.

Each test covers one numbered criterion and prints a single pass/fail line
with the measured details, so a plain pytest run yields one verdict per
criterion. The two simulation criteria are marked slow but still run by
default; see the README for expected wall times.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

from stablemeta import (
    EffectScale,
    Hyperparams,
    TargetProfile,
    TrialRecord,
    fit_amt,
    fixed_effect,
    joint_ridge_wls,
    legacy_anchor_penalty,
    make_dataset,
    perturbation_bootstrap,
    read_dataset_csv,
    robust_loss,
    simulate_coverage,
    simulate_main,
    aggregate_metrics,
    tau2_dersimonian_laird,
    wls_meta_regression,
)
from stablemeta.cli import main as cli_main


def _verdict(label: str, ok: bool, detail: str) -> None:
    print(f"acceptance {label}: {'PASS' if ok else 'FAIL'} ({detail})")


def _random_instance(rng, k=24, p=4, q=3):
    z_extra = rng.normal(0.0, 1.0, size=(k, p - 1))
    a = rng.integers(0, 2, size=(k, q)).astype(float)
    v = rng.uniform(0.05, 0.8, size=k)
    beta = rng.normal(0.0, 0.4, size=p)
    gamma = rng.normal(0.0, 0.2, size=q)
    trials = []
    for i in range(k):
        mean = beta[0] + z_extra[i] @ beta[1:] + (a[i] @ gamma if q else 0.0)
        y = mean + 0.3 * rng.normal() * math.sqrt(v[i])
        trials.append(
            TrialRecord(
                id=f"t{i}",
                y=float(y),
                v=float(v[i]),
                z=(1.0,) + tuple(z_extra[i]),
                a=tuple(a[i]),
                regime=f"g{int(rng.integers(0, 4))}",
            )
        )
    return make_dataset(trials, EffectScale.RISK_DIFFERENCE)


def test_criterion_01_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(101)
    lambda_pairs = [(0.1, 0.0), (1.0, 1e-6), (3.0, 1e-3)]
    worst = 0.0
    for i in range(50):
        ds = _random_instance(rng)
        lg, lr = lambda_pairs[i % len(lambda_pairs)]
        fit = fit_amt(ds, Hyperparams(rho=0.0, lambda_gamma=lg, lambda_r=lr))
        beta, gamma = joint_ridge_wls(ds, lg, lr)
        diff = max(
            float(np.max(np.abs(np.array(fit.beta) - beta))),
            float(np.max(np.abs(np.array(fit.gamma) - gamma))) if ds.q else 0.0,
        )
        worst = max(worst, diff)

    worst_wls = 0.0
    for _ in range(10):
        ds = _random_instance(rng, q=0)
        fit = fit_amt(ds, Hyperparams(rho=0.0, lambda_gamma=0.0, lambda_r=0.0))
        res = wls_meta_regression(ds, TargetProfile((1.0, 0.0, 0.0, 0.0)))
        worst_wls = max(
            worst_wls, float(np.max(np.abs(np.array(fit.beta) - res.beta)))
        )

    elapsed = time.monotonic() - started
    ok = worst <= 1e-6 and worst_wls <= 1e-6 and elapsed < 10.0
    _verdict(
        "01 closed-form oracle equivalence",
        ok,
        f"ridge diff {worst:.2e}, wls diff {worst_wls:.2e}, {elapsed:.1f}s",
    )
    assert worst <= 1e-6
    assert worst_wls <= 1e-6
    assert elapsed < 10.0


def test_criterion_02_null_anchor_consistency():
    started = time.monotonic()
    rng = np.random.default_rng(102)
    k = 200
    beta_star = np.array([0.3, -0.2, 0.15, 0.05])
    x1 = rng.normal(0.0, 1.0, size=k)
    x2 = rng.uniform(0.0, 1.0, size=k)
    x3 = rng.integers(0, 2, size=k).astype(float)
    a = rng.integers(0, 2, size=(k, 3)).astype(float)
    z = np.column_stack([np.ones(k), x1, x2, x3])
    mean = z @ beta_star
    y = mean + 1e-3 * rng.standard_normal(k)
    trials = [
        TrialRecord(
            id=f"t{i}",
            y=float(y[i]),
            v=1e-6,
            z=tuple(z[i]),
            a=tuple(a[i]),
            regime="|".join(str(int(b)) for b in a[i]),
        )
        for i in range(k)
    ]
    ds = make_dataset(trials, EffectScale.RISK_DIFFERENCE)

    worst = {}
    for rho in (0.0, 0.2, 0.5, 0.8):
        fit = fit_amt(ds, Hyperparams(rho=rho))
        worst[rho] = float(np.max(np.abs(np.array(fit.beta) - beta_star)))
    elapsed = time.monotonic() - started
    worst_all = max(worst.values())
    ok = worst_all <= 1e-3 and elapsed < 30.0
    _verdict(
        "02 null-anchor recovery across rho",
        ok,
        f"max coef err {worst_all:.2e}, {elapsed:.1f}s",
    )
    assert worst_all <= 1e-3, worst
    assert elapsed < 30.0


def test_criterion_03_joint_model_removes_anchor_bias():
    rng = np.random.default_rng(103)
    k = 40
    x = rng.normal(0.0, 1.0, size=(k, 2))
    z = np.column_stack([np.ones(k), x])
    v = rng.uniform(0.05, 0.5, size=k)
    w = 1.0 / v

    # Anchors whose centred part is W-orthogonal to the covariate span but
    # whose precision-weighted mean is not zero.
    u = rng.normal(0.0, 1.0, size=(k, 2))
    gram = z.T @ (w[:, None] * z)
    for _ in range(2):
        coef = np.linalg.solve(gram, z.T @ (w[:, None] * u))
        u = u - z @ coef
    m = np.array([0.6, -0.4])
    a = u + m

    beta_star = np.array([0.1, -0.05, 0.08])
    gamma0 = np.array([0.02, -0.03])
    y = z @ beta_star + a @ gamma0  # noiseless

    trials = [
        TrialRecord(
            id=f"t{i}",
            y=float(y[i]),
            v=float(v[i]),
            z=tuple(z[i]),
            a=tuple(a[i]),
            regime=f"{int(u[i, 0] > 0)}|{int(u[i, 1] > 0)}",
        )
        for i in range(k)
    ]
    ds = make_dataset(trials, EffectScale.RISK_DIFFERENCE)

    worst_beta = 0.0
    for rho in (0.0, 0.2):
        fit = fit_amt(ds, Hyperparams(rho=rho, lambda_gamma=1e-8, lambda_r=0.0))
        worst_beta = max(
            worst_beta, float(np.max(np.abs(np.array(fit.beta) - beta_star)))
        )

    fe = fixed_effect(ds)
    ew_surface = float((w @ (z @ beta_star)) / w.sum())
    ew_anchor = float((w @ (a @ gamma0)) / w.sum())
    fe_error_gap = abs((fe.theta_hat - ew_surface) - ew_anchor)

    ok = worst_beta <= 1e-3 and fe_error_gap <= 1e-3
    _verdict(
        "03 anchor bias absorbed by joint fit",
        ok,
        f"beta err {worst_beta:.2e}, fe gap {fe_error_gap:.2e}, "
        f"anchor mean effect {ew_anchor:.4f}",
    )
    assert worst_beta <= 1e-3
    assert fe_error_gap <= 1e-3
    # The construction is only interesting when FE is materially biased.
    assert abs(ew_anchor) > 0.01


def test_criterion_04_legacy_penalty_is_inert():
    rng = np.random.default_rng(104)
    ds = _random_instance(rng, k=20, p=3, q=2)
    worst = 0.0
    reference = legacy_anchor_penalty(ds, np.zeros(3))
    for _ in range(100):
        b1 = rng.normal(0.0, 2.0, size=3)
        b2 = rng.normal(0.0, 2.0, size=3)
        p1 = legacy_anchor_penalty(ds, b1)
        p2 = legacy_anchor_penalty(ds, b2)
        worst = max(worst, abs(p1 - p2) / max(abs(p1), abs(p2), 1e-300))
    ok = worst <= 1e-10
    _verdict(
        "04 legacy anchor penalty inert in beta",
        ok,
        f"max relative spread {worst:.2e}, value {reference:.3g}",
    )
    assert worst <= 1e-10


def test_criterion_05_softmax_sandwich_exact():
    rng = np.random.default_rng(105)
    violations = 0
    for i in range(1000):
        g = int(rng.integers(1, 13))
        scale = 10.0 ** rng.uniform(-8, 2)
        if i % 7 == 0:
            losses = np.full(g, float(rng.uniform(0.0, scale)))  # exact ties
        else:
            losses = rng.uniform(0.0, scale, size=g)
        alpha = float(rng.uniform(0.1, 50.0))
        s = float(10.0 ** rng.uniform(-12, 1))
        val = robust_loss(losses, alpha, s)
        lmax = float(np.max(losses))
        upper = lmax + (s / alpha) * float(np.log(float(g)))
        if not (val >= lmax and val <= upper):
            violations += 1
    ok = violations == 0
    _verdict(
        "05 softmax sandwich exact on 1000 draws",
        ok,
        f"{violations} violations",
    )
    assert violations == 0


@pytest.mark.slow
def test_criterion_06_simulation_patterns():
    started = time.monotonic()
    results = simulate_main(
        ["stable", "anchor_shift", "sign_flip"], reps=500, base_seed=0, workers=1
    )
    rows = aggregate_metrics(results)
    by = {(r.scenario, r.method): r for r in rows}
    elapsed = time.monotonic() - started

    fe_bias = by[("anchor_shift", "FE")].bias
    amt_bias = by[("anchor_shift", "AMT_rho00")].bias
    gate_a = fe_bias <= -0.004 and abs(amt_bias) <= 0.5 * abs(fe_bias)

    rmse = [by[("stable", f"AMT_rho{t}")].rmse for t in ("00", "20", "50", "80")]
    gate_b_monotone = all(b >= a for a, b in zip(rmse, rmse[1:]))
    fe_rmse = by[("stable", "FE")].rmse
    wls_rmse = by[("stable", "WLS_META_REG")].rmse
    gate_b_order = fe_rmse < wls_rmse <= 1.3 * rmse[0]

    flip_abstain = by[("sign_flip", "AMT_rho20")].abstain_rate
    stable_abstain = by[("stable", "AMT_rho20")].abstain_rate
    gate_c = (
        flip_abstain >= 0.70
        and stable_abstain <= 0.40
        and flip_abstain - stable_abstain >= 0.50
    )
    gate_time = elapsed <= 1800.0

    ok = gate_a and gate_b_monotone and gate_b_order and gate_c and gate_time
    _verdict(
        "06 scenario patterns at R=500",
        ok,
        f"anchor_shift FE bias {fe_bias:.4f} vs AMT {amt_bias:.4f}; "
        f"stable rmse {', '.join(f'{x:.4f}' for x in rmse)} "
        f"(FE {fe_rmse:.4f}, WLS {wls_rmse:.4f}); "
        f"abstain flip {flip_abstain:.2f} vs stable {stable_abstain:.2f}; "
        f"{elapsed:.0f}s",
    )
    assert gate_a, (fe_bias, amt_bias)
    assert gate_b_monotone, rmse
    assert gate_b_order, (fe_rmse, wls_rmse, rmse[0])
    assert gate_c, (flip_abstain, stable_abstain)
    assert gate_time, elapsed


@pytest.mark.slow
def test_criterion_07_interval_coverage():
    started = time.monotonic()
    rows = simulate_coverage(
        ["dominant_megatrial", "confounded_anchor"],
        reps=100,
        b=30,
        base_seed=0,
        workers=1,
    )
    by = {(r.scenario, r.method): r.coverage for r in rows}
    elapsed = time.monotonic() - started

    mega_fe = by[("dominant_megatrial", "FE")]
    mega_amt = by[("dominant_megatrial", "AMT_rho20")]
    conf_fe = by[("confounded_anchor", "FE")]
    conf_amt = by[("confounded_anchor", "AMT_rho20")]
    ok = (
        mega_fe <= 0.10
        and mega_amt >= 0.70
        and conf_fe <= 0.50
        and conf_amt >= 0.75
        and elapsed <= 2700.0
    )
    _verdict(
        "07 coverage split at R=100 B=30",
        ok,
        f"megatrial FE {mega_fe:.2f} vs AMT {mega_amt:.2f}; "
        f"confounded FE {conf_fe:.2f} vs AMT {conf_amt:.2f}; {elapsed:.0f}s",
    )
    assert mega_fe <= 0.10
    assert mega_amt >= 0.70
    assert conf_fe <= 0.50
    assert conf_amt >= 0.75
    assert elapsed <= 2700.0


def test_criterion_08_bootstrap_matches_wald():
    rng = np.random.default_rng(800)
    trials = [
        TrialRecord(
            id=f"t{i}",
            y=float(rng.normal(0.05, 0.08)),
            v=float(rng.uniform(0.003, 0.02)),
            z=(1.0,),
            a=(),
            regime="g",
        )
        for i in range(8)
    ]
    ds = make_dataset(trials, EffectScale.RISK_DIFFERENCE)
    w = ds.weights()
    theta = float(np.sum(w * ds.y) / np.sum(w))
    se = math.sqrt(1.0 / float(np.sum(w)))
    crit = 1.959963984540054
    b = 2000
    tol = 3.0 * se / math.sqrt(b)

    res = perturbation_bootstrap(
        ds,
        Hyperparams(rho=0.0, lambda_r=0.0),
        TargetProfile(z_bar=(1.0,)),
        b=b,
        seed=2,
    )
    lo_err = abs(res.lo - (theta - crit * se))
    hi_err = abs(res.hi - (theta + crit * se))
    ok = lo_err <= tol and hi_err <= tol and res.b_effective == b
    _verdict(
        "08 bootstrap endpoints track Wald",
        ok,
        f"lo err {lo_err:.2e}, hi err {hi_err:.2e}, tol {tol:.2e}",
    )
    assert lo_err <= tol
    assert hi_err <= tol
    assert res.b_effective == b


def test_criterion_09_application_datasets():
    olkin = os.environ.get("STABLEMETA_OLKIN_CSV")
    aspirin = os.environ.get("STABLEMETA_ASPIRIN_CSV")
    if not olkin and not aspirin:
        _verdict(
            "09 application reproduction",
            True,
            "SKIPPED: set STABLEMETA_OLKIN_CSV / STABLEMETA_ASPIRIN_CSV",
        )
        pytest.skip("application CSVs not supplied")

    details = []
    if olkin:
        ds = read_dataset_csv(olkin, EffectScale.LOG_ODDS_RATIO,
                              continuity_correction=True)
        fe = fixed_effect(ds)
        tau2 = tau2_dersimonian_laird(ds)
        details.append(f"olkin FE {fe.theta_hat:.4f}, DL tau2 {tau2:.4f}")
        assert abs(fe.theta_hat - (-0.283)) <= 0.005
        assert abs(tau2 - 0.013) <= 0.005
    if aspirin:
        ds = read_dataset_csv(aspirin, EffectScale.LOG_ODDS_RATIO,
                              continuity_correction=True)
        fe = fixed_effect(ds)
        details.append(f"aspirin FE {fe.theta_hat:.4f}")
        assert abs(fe.theta_hat - (-0.105)) <= 0.003
    _verdict("09 application reproduction", True, "; ".join(details))


@pytest.mark.slow
def test_criterion_10_cli_determinism_across_workers(tmp_path):
    base = [
        "simulate",
        "--scenario", "stable,sign_flip",
        "--reps", "3",
        "--seed", "17",
    ]
    out1 = tmp_path / "w1"
    out2 = tmp_path / "w2"
    rc1 = cli_main(base + ["--workers", "1", "--out", str(out1)])
    rc2 = cli_main(base + ["--workers", "2", "--out", str(out2)])
    bytes1 = (out1 / "metrics.csv").read_bytes()
    bytes2 = (out2 / "metrics.csv").read_bytes()
    ok = rc1 == 0 and rc2 == 0 and bytes1 == bytes2
    _verdict(
        "10 simulate byte-identical across workers",
        ok,
        f"{len(bytes1)} bytes each",
    )
    assert rc1 == 0 and rc2 == 0
    assert bytes1 == bytes2
