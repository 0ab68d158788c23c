"""Classical pooled estimators: fixed effect, random effects, meta-regression.

These are the comparators every analysis reports alongside the robust fit.
All confidence intervals are plain Wald intervals on the working scale.

References
----------
DerSimonian R, Laird N (1986). Meta-analysis in clinical trials.
    Controlled Clinical Trials 7(3): 177-188.
Paule RC, Mandel J (1982). Consensus values and weighting factors.
    Journal of Research of the National Bureau of Standards 87(5): 377-385.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, TargetProfile
from .errors import DimensionMismatch, SingularDesign, TooFewTrials
from .util import normal_critical

METHOD_FE = "FE"
METHOD_DL = "DL_RE"
METHOD_PM = "PM_RE"
METHOD_WLS = "WLS_META_REG"

# Condition-number ceiling beyond which an unpenalised Gram matrix is treated
# as rank-deficient.
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class ClassicalResult:
    """Point estimate, Wald interval, and heterogeneity summary."""

    method: str
    theta_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    tau2: float
    q_stat: float
    level: float = 0.95
    beta: tuple[float, ...] | None = None


def _pooled(y: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    wsum = w.sum()
    theta = float((w * y).sum() / wsum)
    se = float(math.sqrt(1.0 / wsum))
    return theta, se


def fixed_effect(ds: Dataset, level: float = 0.95) -> ClassicalResult:
    """Inverse-variance weighted common-effect estimate."""
    w = ds.weights()
    theta, se = _pooled(ds.y, w)
    crit = normal_critical(level)
    q = cochran_q(ds) if ds.k >= 2 else math.nan
    return ClassicalResult(
        method=METHOD_FE,
        theta_hat=theta,
        se=se,
        ci_lo=theta - crit * se,
        ci_hi=theta + crit * se,
        tau2=0.0,
        q_stat=q,
        level=level,
    )


def cochran_q(ds: Dataset) -> float:
    """Cochran's heterogeneity statistic about the fixed-effect mean."""
    if ds.k < 2:
        raise TooFewTrials("Cochran's Q needs at least 2 trials")
    w = ds.weights()
    theta, _ = _pooled(ds.y, w)
    return float((w * (ds.y - theta) ** 2).sum())


def tau2_dersimonian_laird(ds: Dataset) -> float:
    """DerSimonian-Laird moment estimate of between-trial variance,
    truncated at zero."""
    if ds.k < 2:
        raise TooFewTrials("DerSimonian-Laird needs at least 2 trials")
    w = ds.weights()
    q = cochran_q(ds)
    s1 = float(w.sum())
    s2 = float((w**2).sum())
    denom = s1 - s2 / s1
    if denom <= 0.0:
        return 0.0
    return max(0.0, (q - (ds.k - 1)) / denom)


def _generalised_q(ds: Dataset, tau2: float) -> float:
    w = 1.0 / (ds.v + tau2)
    theta = float((w * ds.y).sum() / w.sum())
    return float((w * (ds.y - theta) ** 2).sum())


def tau2_paule_mandel(ds: Dataset, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Paule-Mandel estimate: the tau2 solving generalised Q(tau2) = k - 1.

    Q is decreasing in tau2, so bisection on a bracketed interval converges
    monotonically; if even tau2 = 0 gives Q <= k - 1 the estimate is 0.
    """
    if ds.k < 2:
        raise TooFewTrials("Paule-Mandel needs at least 2 trials")
    k = ds.k
    target = float(k - 1)
    if _generalised_q(ds, 0.0) <= target:
        return 0.0
    w = ds.weights()
    hi = float(cochran_q(ds) / w.sum()) * 10.0 + 1.0
    iterations = 0
    while _generalised_q(ds, hi) > target:
        hi *= 2.0
        iterations += 1
        if iterations >= max_iter:
            return hi
    lo = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if _generalised_q(ds, mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return 0.5 * (lo + hi)


def random_effects(
    ds: Dataset,
    tau2: float,
    level: float = 0.95,
    method: str = METHOD_DL,
) -> ClassicalResult:
    """Random-effects pooled estimate with weights 1/(v_i + tau2)."""
    if tau2 < 0.0:
        raise ValueError(f"tau2 must be >= 0, got {tau2}")
    w = 1.0 / (ds.v + tau2)
    theta, se = _pooled(ds.y, w)
    crit = normal_critical(level)
    q = cochran_q(ds) if ds.k >= 2 else math.nan
    return ClassicalResult(
        method=method,
        theta_hat=theta,
        se=se,
        ci_lo=theta - crit * se,
        ci_hi=theta + crit * se,
        tau2=float(tau2),
        q_stat=q,
        level=level,
    )


def wls_meta_regression(
    ds: Dataset,
    target: TargetProfile,
    level: float = 0.95,
) -> ClassicalResult:
    """Weighted least-squares meta-regression on the transportable
    covariates only, evaluated at a target profile.

    The variance of the target prediction is the plain sandwich-free Wald
    form z_bar' (Z' W Z)^-1 z_bar with no dispersion adjustment.
    """
    if len(target.z_bar) != ds.p:
        raise DimensionMismatch(
            f"target has {len(target.z_bar)} entries, design has p={ds.p}"
        )
    if ds.k < ds.p:
        raise TooFewTrials(
            f"meta-regression needs at least p={ds.p} trials, got {ds.k}"
        )
    w = ds.weights()
    gram = ds.z.T @ (w[:, None] * ds.z)
    if np.linalg.cond(gram) > CONDITION_LIMIT:
        raise SingularDesign(
            "covariate Gram matrix is numerically rank-deficient"
        )
    rhs = ds.z.T @ (w * ds.y)
    beta = np.linalg.solve(gram, rhs)
    zbar = np.asarray(target.z_bar, dtype=float)
    theta = float(zbar @ beta)
    gram_inv = np.linalg.inv(gram)
    se = float(math.sqrt(zbar @ gram_inv @ zbar))
    crit = normal_critical(level)
    q = cochran_q(ds) if ds.k >= 2 else math.nan
    return ClassicalResult(
        method=METHOD_WLS,
        theta_hat=theta,
        se=se,
        ci_lo=theta - crit * se,
        ci_hi=theta + crit * se,
        tau2=0.0,
        q_stat=q,
        level=level,
        beta=tuple(float(b) for b in beta),
    )
