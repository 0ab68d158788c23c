"""Trial-level data structures, effect-scale conversions, and CSV ingest.

A trial contributes an effect estimate ``y`` with within-trial variance ``v``,
a transportable covariate vector ``z`` (first entry an intercept 1), an
optional non-transportable anchor vector ``a`` (era, region, and similar
provenance markers), and a regime label grouping trials for the robust loss.

Anchors are standardised at validation time to precision-weighted mean 0 and
precision-weighted variance 1; the transform is stored on the dataset so
fitted anchor coefficients can be mapped back to the original scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    CsvFormatError,
    DimensionMismatch,
    EmptyDataset,
    InvalidCounts,
    MissingInterceptColumn,
    NonFiniteValue,
    NonPositiveVariance,
    ZeroCell,
)
from .util import fmt_float


class EffectScale(str, Enum):
    """Scale the trial effects live on."""

    RISK_DIFFERENCE = "rd"
    LOG_ODDS_RATIO = "logor"


def _as_float_tuple(values, what: str) -> tuple[float, ...]:
    out = tuple(float(x) for x in values)
    if not all(math.isfinite(x) for x in out):
        raise NonFiniteValue(f"{what} contains a non-finite entry: {out}")
    return out


@dataclass(frozen=True)
class TrialRecord:
    """One trial: effect, variance, covariates, anchors, regime label.

    The precision weight 1/v is always derived on demand, never stored.
    """

    id: str
    y: float
    v: float
    z: tuple[float, ...]
    a: tuple[float, ...]
    regime: str

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "z", _as_float_tuple(self.z, f"trial {self.id}: z"))
        object.__setattr__(self, "a", _as_float_tuple(self.a, f"trial {self.id}: a"))
        object.__setattr__(self, "regime", str(self.regime))
        if not math.isfinite(self.y):
            raise NonFiniteValue(f"trial {self.id}: effect y is not finite")
        if not math.isfinite(self.v) or self.v <= 0.0:
            raise NonPositiveVariance(
                f"trial {self.id}: variance must be finite and > 0, got {self.v}"
            )
        if len(self.z) < 1 or self.z[0] != 1.0:
            raise MissingInterceptColumn(
                f"trial {self.id}: first covariate entry must be exactly 1"
            )


@dataclass(frozen=True)
class TargetProfile:
    """Covariate profile the pooled effect is transported to."""

    z_bar: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "z_bar", _as_float_tuple(self.z_bar, "target profile z_bar")
        )
        if len(self.z_bar) < 1 or self.z_bar[0] != 1.0:
            raise MissingInterceptColumn("target profile must start with intercept 1")


@dataclass(frozen=True, eq=False)
class Dataset:
    """A validated, immutable collection of trials plus derived arrays.

    ``a_std`` holds the standardised anchors actually used when fitting;
    ``anchor_mean`` and ``anchor_scale`` record the transform back to the
    raw anchor coding.
    """

    trials: tuple[TrialRecord, ...]
    scale: EffectScale
    z_names: tuple[str, ...]
    a_names: tuple[str, ...]
    regimes: tuple[str, ...]
    y: np.ndarray
    v: np.ndarray
    z: np.ndarray
    a_raw: np.ndarray
    a_std: np.ndarray
    regime_idx: np.ndarray
    anchor_mean: np.ndarray
    anchor_scale: np.ndarray

    @property
    def k(self) -> int:
        return len(self.trials)

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def q(self) -> int:
        return self.a_raw.shape[1]

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    def weights(self) -> np.ndarray:
        """Precision weights 1/v, derived on demand."""
        return 1.0 / self.v

    def with_y(self, new_y) -> "Dataset":
        """Rebuild the dataset with replaced effects (variances unchanged)."""
        new_y = np.asarray(new_y, dtype=float)
        if new_y.shape != (self.k,):
            raise DimensionMismatch(
                f"replacement y has shape {new_y.shape}, expected ({self.k},)"
            )
        trials = tuple(
            replace(t, y=float(val)) for t, val in zip(self.trials, new_y)
        )
        return make_dataset(trials, self.scale, self.z_names, self.a_names)

    def without(self, index: int) -> "Dataset":
        """Dataset with one trial held out (regimes and anchor transform are
        recomputed from the remaining trials)."""
        if not 0 <= index < self.k:
            raise IndexError(f"trial index {index} out of range for k={self.k}")
        trials = self.trials[:index] + self.trials[index + 1 :]
        return make_dataset(trials, self.scale, self.z_names, self.a_names)

    def subset(self, indices) -> "Dataset":
        trials = tuple(self.trials[i] for i in indices)
        return make_dataset(trials, self.scale, self.z_names, self.a_names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.trials == other.trials
            and self.scale == other.scale
            and self.z_names == other.z_names
            and self.a_names == other.a_names
        )

    def __hash__(self):
        return hash((self.trials, self.scale, self.z_names, self.a_names))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def make_dataset(
    trials,
    scale: EffectScale,
    z_names=None,
    a_names=None,
) -> Dataset:
    """Validate trial records and build the derived arrays.

    Regimes are enumerated in first-appearance order. Raises EmptyDataset,
    DimensionMismatch, or the per-trial validation errors.
    """
    trials = tuple(trials)
    if not trials:
        raise EmptyDataset("a dataset needs at least one trial")
    scale = EffectScale(scale)

    p = len(trials[0].z)
    q = len(trials[0].a)
    for t in trials:
        if len(t.z) != p:
            raise DimensionMismatch(
                f"trial {t.id}: z has length {len(t.z)}, expected {p}"
            )
        if len(t.a) != q:
            raise DimensionMismatch(
                f"trial {t.id}: a has length {len(t.a)}, expected {q}"
            )

    if z_names is None:
        z_names = ("intercept",) + tuple(f"z{i}" for i in range(1, p))
    z_names = tuple(str(n) for n in z_names)
    if len(z_names) != p:
        raise DimensionMismatch(f"{len(z_names)} z names for {p} columns")
    if a_names is None:
        a_names = tuple(f"a{i}" for i in range(q))
    a_names = tuple(str(n) for n in a_names)
    if len(a_names) != q:
        raise DimensionMismatch(f"{len(a_names)} a names for {q} columns")

    regimes: list[str] = []
    for t in trials:
        if t.regime not in regimes:
            regimes.append(t.regime)
    regime_pos = {g: i for i, g in enumerate(regimes)}

    y = np.array([t.y for t in trials], dtype=float)
    v = np.array([t.v for t in trials], dtype=float)
    z = np.array([t.z for t in trials], dtype=float).reshape(len(trials), p)
    a_raw = np.array([t.a for t in trials], dtype=float).reshape(len(trials), q)
    regime_idx = np.array([regime_pos[t.regime] for t in trials], dtype=np.intp)

    w = 1.0 / v
    wsum = w.sum()
    if q:
        mean = (w[:, None] * a_raw).sum(axis=0) / wsum
        var = (w[:, None] * (a_raw - mean) ** 2).sum(axis=0) / wsum
        sd = np.sqrt(var)
        # A constant anchor column carries no signal; leave it unscaled so the
        # standardised column is identically zero.
        sd = np.where(sd > 1e-150, sd, 1.0)
        a_std = (a_raw - mean) / sd
    else:
        mean = np.zeros(0)
        sd = np.ones(0)
        a_std = np.zeros((len(trials), 0))

    return Dataset(
        trials=trials,
        scale=scale,
        z_names=z_names,
        a_names=a_names,
        regimes=tuple(regimes),
        y=_frozen(y),
        v=_frozen(v),
        z=_frozen(z),
        a_raw=_frozen(a_raw),
        a_std=_frozen(a_std),
        regime_idx=_frozen(regime_idx),
        anchor_mean=_frozen(mean),
        anchor_scale=_frozen(sd),
    )


# ---------------------------------------------------------------------------
# Effect-scale conversions from 2x2 arm counts
# ---------------------------------------------------------------------------


def _check_counts(events_t: int, n_t: int, events_c: int, n_c: int) -> None:
    for name, e, n in (("treatment", events_t, n_t), ("control", events_c, n_c)):
        if int(e) != e or int(n) != n:
            raise InvalidCounts(f"{name} arm: counts must be integers")
        if n < 1:
            raise InvalidCounts(f"{name} arm: size must be >= 1, got {n}")
        if e < 0 or e > n:
            raise InvalidCounts(
                f"{name} arm: events must lie in [0, {n}], got {e}"
            )


def log_odds_ratio_from_counts(
    events_t: int,
    n_t: int,
    events_c: int,
    n_c: int,
    continuity_correction: bool = False,
) -> tuple[float, float]:
    """Log odds ratio and its large-sample variance from a 2x2 table.

    The variance is the sum of reciprocal cell counts. With
    ``continuity_correction`` a flat 0.5 is added to every cell whenever any
    cell is zero; otherwise a zero cell raises ZeroCell.
    """
    _check_counts(events_t, n_t, events_c, n_c)
    cells = [
        float(events_t),
        float(n_t - events_t),
        float(events_c),
        float(n_c - events_c),
    ]
    if any(c == 0.0 for c in cells):
        if not continuity_correction:
            raise ZeroCell(
                "zero cell in 2x2 table; pass continuity_correction=True "
                "to add 0.5 to every cell"
            )
        cells = [c + 0.5 for c in cells]
    a, b, c, d = cells
    y = math.log((a * d) / (b * c))
    v = 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d
    return y, v


def risk_difference_from_counts(
    events_t: int, n_t: int, events_c: int, n_c: int
) -> tuple[float, float]:
    """Risk difference and its binomial variance from arm counts."""
    _check_counts(events_t, n_t, events_c, n_c)
    p_t = events_t / n_t
    p_c = events_c / n_c
    y = p_t - p_c
    v = p_t * (1.0 - p_t) / n_t + p_c * (1.0 - p_c) / n_c
    return y, v


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

_COUNT_COLUMNS = ("events_t", "n_t", "events_c", "n_c")


def read_dataset_csv(
    path,
    scale: EffectScale,
    continuity_correction: bool = False,
) -> Dataset:
    """Parse a trial CSV into a validated Dataset.

    Column layout: ``trial_id``, then either ``y,v`` or
    ``events_t,n_t,events_c,n_c``, then ``z.*`` columns (the first must be
    ``z.intercept``), then optional ``a.*`` columns, then ``regime``.
    """
    scale = EffectScale(scale)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        rows = [row for row in reader if row]

    header = [h.strip() for h in header]
    if not header or header[0] != "trial_id":
        raise CsvFormatError(f"{path}: first column must be 'trial_id'")
    if header[-1] != "regime":
        raise CsvFormatError(f"{path}: last column must be 'regime'")

    body = header[1:-1]
    if body[:2] == ["y", "v"]:
        from_counts = False
        effect_width = 2
    elif tuple(body[:4]) == _COUNT_COLUMNS:
        from_counts = True
        effect_width = 4
    else:
        raise CsvFormatError(
            f"{path}: expected 'y,v' or 'events_t,n_t,events_c,n_c' after trial_id"
        )

    feature_cols = body[effect_width:]
    z_cols = [c for c in feature_cols if c.startswith("z.")]
    a_cols = [c for c in feature_cols if c.startswith("a.")]
    if feature_cols != z_cols + a_cols:
        raise CsvFormatError(
            f"{path}: covariate columns must be all z.* then all a.*"
        )
    if not z_cols or z_cols[0] != "z.intercept":
        raise CsvFormatError(f"{path}: first covariate column must be 'z.intercept'")

    n_cols = len(header)
    records = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != n_cols:
            raise CsvFormatError(
                f"{path}:{lineno}: expected {n_cols} cells, got {len(row)}"
            )
        trial_id = row[0]
        cursor = 1
        if from_counts:
            try:
                counts = [float(x) for x in row[cursor : cursor + 4]]
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: bad count cell: {exc}") from None
            if scale is EffectScale.LOG_ODDS_RATIO:
                y, v = log_odds_ratio_from_counts(
                    *counts, continuity_correction=continuity_correction
                )
            else:
                y, v = risk_difference_from_counts(*counts)
            cursor += 4
        else:
            try:
                y = float(row[cursor])
                v = float(row[cursor + 1])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: bad y/v cell: {exc}") from None
            cursor += 2
        try:
            z = [float(x) for x in row[cursor : cursor + len(z_cols)]]
            cursor += len(z_cols)
            a = [float(x) for x in row[cursor : cursor + len(a_cols)]]
            cursor += len(a_cols)
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: bad covariate cell: {exc}") from None
        regime = row[cursor]
        records.append(TrialRecord(id=trial_id, y=y, v=v, z=z, a=a, regime=regime))

    z_names = tuple(c[2:] for c in z_cols)
    a_names = tuple(c[2:] for c in a_cols)
    return make_dataset(records, scale, z_names, a_names)


def write_dataset_csv(ds: Dataset, path) -> None:
    """Serialise a dataset in the y,v column layout (raw anchor coding).

    Floats are written with 17 significant digits so a read back yields an
    identical dataset.
    """
    path = Path(path)
    header = (
        ["trial_id", "y", "v"]
        + [f"z.{n}" for n in ds.z_names]
        + [f"a.{n}" for n in ds.a_names]
        + ["regime"]
    )
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in ds.trials:
            writer.writerow(
                [t.id, fmt_float(t.y), fmt_float(t.v)]
                + [fmt_float(x) for x in t.z]
                + [fmt_float(x) for x in t.a]
                + [t.regime]
            )
