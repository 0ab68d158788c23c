"""Meta-analysis with anchor-mediated transport and regime-robust pooling.

The package estimates a treatment effect at a stated target covariate
profile from trial-level summaries, separating transportable covariate
structure from nuisance anchors, and reports sign-stability diagnostics
plus perturbation-bootstrap intervals alongside the classical pooled
estimators.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .amt import (
    AmtFitResult,
    Hyperparams,
    blended_objective,
    fit_amt,
    joint_ridge_wls,
    legacy_anchor_penalty,
    regime_losses,
    robust_loss,
    scale_constant,
    stable_target_effect,
)
from .classical import (
    METHOD_DL,
    METHOD_FE,
    METHOD_PM,
    METHOD_WLS,
    ClassicalResult,
    cochran_q,
    fixed_effect,
    random_effects,
    tau2_dersimonian_laird,
    tau2_paule_mandel,
    wls_meta_regression,
)
from .data import (
    Dataset,
    EffectScale,
    TargetProfile,
    TrialRecord,
    log_odds_ratio_from_counts,
    make_dataset,
    read_dataset_csv,
    risk_difference_from_counts,
    write_dataset_csv,
)
from .diagnostics import (
    REGIME_EFFECT_FALLBACK,
    REGIME_EFFECT_REGRESSION,
    AbstainReason,
    DiagnosticsResult,
    RegimeEffect,
    abstention_rule,
    regime_target_effects,
    run_diagnostics,
    sign_stability,
)
from .errors import (
    CsvFormatError,
    DimensionMismatch,
    EmptyDataset,
    EmptyRegime,
    InvalidCounts,
    MissingInterceptColumn,
    NonFiniteValue,
    NonPositiveVariance,
    SingularDesign,
    StableMetaError,
    TooFewTrials,
    ZeroCell,
)
from .inference import (
    BOOTSTRAP_METHOD,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_RHO_GRID,
    RULE_MINIMISER,
    RULE_ONE_SE,
    IntervalEstimate,
    ScoreEntry,
    TuningSelection,
    loso_select,
    perturbation_bootstrap,
)
from .simulation import (
    A_NAMES,
    AMT_RHO_GRID,
    COVERAGE_AMT_METHOD,
    COVERAGE_COLUMNS,
    METHOD_ORDER,
    METRICS_COLUMNS,
    SCENARIO_NAMES,
    Z_NAMES,
    CoverageRow,
    MethodOutcome,
    MetricsRow,
    ReplicationResult,
    ScenarioConfig,
    aggregate_coverage,
    aggregate_metrics,
    coverage_to_csv,
    generate_scenario,
    load_scenario_constants,
    metrics_to_csv,
    run_coverage_replication,
    run_replication,
    scenario_config,
    scenario_constants_checksum,
    simulate_coverage,
    simulate_main,
)

__all__ = [
    "__version__",
    "A_NAMES",
    "AMT_RHO_GRID",
    "AbstainReason",
    "AmtFitResult",
    "BOOTSTRAP_METHOD",
    "COVERAGE_AMT_METHOD",
    "COVERAGE_COLUMNS",
    "ClassicalResult",
    "CoverageRow",
    "CsvFormatError",
    "DEFAULT_LAMBDA_GRID",
    "DEFAULT_RHO_GRID",
    "Dataset",
    "DiagnosticsResult",
    "DimensionMismatch",
    "EffectScale",
    "EmptyDataset",
    "EmptyRegime",
    "Hyperparams",
    "IntervalEstimate",
    "InvalidCounts",
    "METHOD_DL",
    "METHOD_FE",
    "METHOD_ORDER",
    "METHOD_PM",
    "METHOD_WLS",
    "METRICS_COLUMNS",
    "MethodOutcome",
    "MetricsRow",
    "MissingInterceptColumn",
    "NonFiniteValue",
    "NonPositiveVariance",
    "REGIME_EFFECT_FALLBACK",
    "REGIME_EFFECT_REGRESSION",
    "RULE_MINIMISER",
    "RULE_ONE_SE",
    "RegimeEffect",
    "ReplicationResult",
    "SCENARIO_NAMES",
    "ScenarioConfig",
    "ScoreEntry",
    "SingularDesign",
    "StableMetaError",
    "TargetProfile",
    "TooFewTrials",
    "TrialRecord",
    "TuningSelection",
    "Z_NAMES",
    "ZeroCell",
    "abstention_rule",
    "aggregate_coverage",
    "aggregate_metrics",
    "blended_objective",
    "cochran_q",
    "coverage_to_csv",
    "fit_amt",
    "fixed_effect",
    "generate_scenario",
    "joint_ridge_wls",
    "legacy_anchor_penalty",
    "load_scenario_constants",
    "log_odds_ratio_from_counts",
    "loso_select",
    "make_dataset",
    "metrics_to_csv",
    "perturbation_bootstrap",
    "random_effects",
    "read_dataset_csv",
    "regime_losses",
    "regime_target_effects",
    "risk_difference_from_counts",
    "robust_loss",
    "run_coverage_replication",
    "run_diagnostics",
    "run_replication",
    "scale_constant",
    "scenario_config",
    "scenario_constants_checksum",
    "sign_stability",
    "simulate_coverage",
    "simulate_main",
    "stable_target_effect",
    "tau2_dersimonian_laird",
    "tau2_paule_mandel",
    "wls_meta_regression",
    "write_dataset_csv",
]
