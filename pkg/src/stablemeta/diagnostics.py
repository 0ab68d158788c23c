"""Sign-stability screening, the abstention rule, and per-regime effects.

Sign stability asks a deliberately crude question: among trials whose
observed effect clears a clinical null band, what precision-weighted share
agrees with the sign of the pooled target estimate? When the disagreeing
minority is also non-trivial, the analysis abstains from a sign claim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .amt import Hyperparams, joint_ridge_wls
from .data import Dataset, TargetProfile
from .errors import DimensionMismatch, StableMetaError


class AbstainReason(str, Enum):
    NONE = "none"
    SIGN_CONFLICT = "sign_conflict"


REGIME_EFFECT_REGRESSION = "regression"
REGIME_EFFECT_FALLBACK = "weighted_mean_fallback"


@dataclass(frozen=True)
class RegimeEffect:
    """Target-profile effect recomputed inside one regime."""

    regime: str
    theta: float
    method: str
    n_trials: int


@dataclass(frozen=True)
class DiagnosticsResult:
    """Sign-stability summary plus per-regime target effects.

    ``ss_trial`` is None when undefined (no informative trials, or a pooled
    estimate of exactly zero). The informative weight fractions sum to 1
    whenever the informative subset is non-empty.
    """

    ss_trial: float | None
    abstain: bool
    abstain_reason: AbstainReason
    informative_weight_pos: float
    informative_weight_neg: float
    regime_effects: tuple[RegimeEffect, ...]


def _informative_split(ds: Dataset, delta: float):
    if delta < 0.0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    w = ds.weights()
    mask = np.abs(ds.y) > delta
    if not mask.any():
        return mask, math.nan, math.nan
    w_inf = w[mask]
    y_inf = ds.y[mask]
    total = w_inf.sum()
    frac_pos = float(w_inf[y_inf > 0].sum() / total)
    return mask, frac_pos, 1.0 - frac_pos


def sign_stability(ds: Dataset, theta_target: float, delta: float) -> float | None:
    """Precision-weighted share of informative trials agreeing in sign with
    the target estimate; None when undefined."""
    mask, _, _ = _informative_split(ds, delta)
    if not mask.any():
        return None
    if theta_target == 0.0 or math.isnan(theta_target):
        return None
    w = ds.weights()
    sign = 1.0 if theta_target > 0 else -1.0
    agree = mask & (np.sign(ds.y) == sign)
    return float(w[agree].sum() / w[mask].sum())


def abstention_rule(
    ds: Dataset, theta_target: float, hp: Hyperparams
) -> tuple[bool, AbstainReason, float | None, float, float]:
    """Two-condition abstention decision.

    Abstain only when sign stability is defined and below the threshold AND
    the minority side of zero still holds at least ``minority_frac`` of the
    informative weight. Returns (abstain, reason, ss, frac_pos, frac_neg).
    """
    mask, frac_pos, frac_neg = _informative_split(ds, hp.delta)
    ss = sign_stability(ds, theta_target, hp.delta)
    abstain = (
        ss is not None
        and ss < hp.tau_threshold
        and min(frac_pos, frac_neg) >= hp.minority_frac
    )
    reason = AbstainReason.SIGN_CONFLICT if abstain else AbstainReason.NONE
    return abstain, reason, ss, frac_pos, frac_neg


def regime_target_effects(
    ds: Dataset, target: TargetProfile, hp: Hyperparams
) -> tuple[RegimeEffect, ...]:
    """Target effect recomputed within each regime.

    Regimes with enough trials for the joint design (k_g >= p + q + 1) get a
    ridge-penalised regression fit; smaller regimes fall back to the
    inverse-variance weighted mean, tagged accordingly.
    """
    if len(target.z_bar) != ds.p:
        raise DimensionMismatch(
            f"target has {len(target.z_bar)} entries, design has p={ds.p}"
        )
    zbar = np.asarray(target.z_bar, dtype=float)
    out = []
    for g_idx, label in enumerate(ds.regimes):
        indices = np.flatnonzero(ds.regime_idx == g_idx)
        sub = ds.subset(indices)
        if sub.k >= ds.p + ds.q + 1:
            try:
                beta, _ = joint_ridge_wls(sub, hp.lambda_gamma, hp.lambda_r)
                out.append(
                    RegimeEffect(
                        regime=label,
                        theta=float(zbar @ beta),
                        method=REGIME_EFFECT_REGRESSION,
                        n_trials=sub.k,
                    )
                )
                continue
            except StableMetaError:
                pass
        w = sub.weights()
        out.append(
            RegimeEffect(
                regime=label,
                theta=float((w * sub.y).sum() / w.sum()),
                method=REGIME_EFFECT_FALLBACK,
                n_trials=sub.k,
            )
        )
    return tuple(out)


def run_diagnostics(
    ds: Dataset,
    theta_target: float,
    target: TargetProfile,
    hp: Hyperparams,
) -> DiagnosticsResult:
    """Assemble the full diagnostics block for a fitted analysis."""
    abstain, reason, ss, frac_pos, frac_neg = abstention_rule(ds, theta_target, hp)
    effects = regime_target_effects(ds, target, hp)
    return DiagnosticsResult(
        ss_trial=ss,
        abstain=abstain,
        abstain_reason=reason,
        informative_weight_pos=frac_pos,
        informative_weight_neg=frac_neg,
        regime_effects=effects,
    )
