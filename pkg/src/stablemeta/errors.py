"""Exception types raised by input validation and the estimators."""

from __future__ import annotations


class StableMetaError(Exception):
    """Base class for all package errors."""


class InvalidCounts(StableMetaError):
    """Arm counts are negative, non-integer, or exceed the arm size."""


class ZeroCell(StableMetaError):
    """A 2x2 cell is zero and no continuity correction was requested."""


class NonFiniteValue(StableMetaError):
    """An effect, variance, covariate, or anchor entry is NaN or infinite."""


class NonPositiveVariance(StableMetaError):
    """A trial variance is zero or negative."""


class MissingInterceptColumn(StableMetaError):
    """The first trial-covariate entry must be exactly 1."""


class DimensionMismatch(StableMetaError):
    """Vector lengths disagree across trials or with a target profile."""


class EmptyDataset(StableMetaError):
    """A dataset must contain at least one trial."""


class TooFewTrials(StableMetaError):
    """An estimator needs more trials than the dataset provides."""


class SingularDesign(StableMetaError):
    """An unpenalised design matrix is numerically rank-deficient."""


class EmptyRegime(StableMetaError):
    """A declared regime has no member trials."""


class CsvFormatError(StableMetaError):
    """A dataset CSV does not follow the documented column layout."""
