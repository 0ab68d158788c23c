"""Small shared helpers: quantiles, checksums, float formatting."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from scipy.stats import norm


def quantile(values, q):
    """Continuous sample quantile with linear interpolation between order
    statistics (the convention whose median of an even count is the midpoint
    of the two central values).
    """
    return float(np.quantile(np.asarray(values, dtype=float), q, method="linear"))


def normal_critical(level: float) -> float:
    """Two-sided standard-normal critical value for a confidence level."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2.0))


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def fmt_float(x: float) -> str:
    """Render a float with 17 significant digits (round-trip exact); empty
    string for missing cells."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return format(float(x), ".17g")
