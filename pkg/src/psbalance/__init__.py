"""Propensity-score balancing weights.

Fits logistic propensity models, builds the full class of balancing
weights (inverse-probability, treated/control, truncated, overlap, and
custom tilting functions), diagnoses covariate balance, estimates
weighted average treatment effects with bootstrap uncertainty, and
evaluates the asymptotic variance of each scheme by quadrature.
"""

from .dataset import (
    CovariateSpec,
    DataError,
    Dataset,
    Indicator,
    IngestionSchema,
    Interaction,
    Power,
    canonical_schema,
    expand,
    load,
    write,
)
from .propensity import (
    CalibrationReport,
    FitError,
    PropensityModel,
    add_score_bin_indicators,
    calibrate,
    fit,
    model_report,
    saturated_scores,
    variance_inflation_preview,
)
from .weights import (
    EmptyTargetError,
    WeightScheme,
    WeightedSample,
    combine_sampling_weights,
    compute,
    export_weights_csv,
    multigroup_overlap,
    parse_scheme,
)
from .balance import (
    BalanceReport,
    DistributionSummary,
    asb,
    verify_exact_balance,
    weighted_distributions,
    weighted_quantile,
)
from .estimate import (
    EstimateReport,
    bootstrap_se,
    effect_by_decile,
    fixed_effects_oracle,
    wate,
)
from .asymptotics import (
    MonteCarloCheck,
    NormalDensity,
    OptimalityScan,
    ScenarioSpec,
    TabulatedDensity,
    VarianceResult,
    benchmark_scenarios,
    implied_propensity,
    load_scenarios,
    monte_carlo_check,
    optimality_scan,
    relative_variance,
    variance_table,
)

__version__ = "0.1.0"

__all__ = [
    "CovariateSpec",
    "DataError",
    "Dataset",
    "Indicator",
    "IngestionSchema",
    "Interaction",
    "Power",
    "canonical_schema",
    "expand",
    "load",
    "write",
    "CalibrationReport",
    "FitError",
    "PropensityModel",
    "add_score_bin_indicators",
    "calibrate",
    "fit",
    "model_report",
    "saturated_scores",
    "variance_inflation_preview",
    "EmptyTargetError",
    "WeightScheme",
    "WeightedSample",
    "combine_sampling_weights",
    "compute",
    "export_weights_csv",
    "multigroup_overlap",
    "parse_scheme",
    "BalanceReport",
    "DistributionSummary",
    "asb",
    "verify_exact_balance",
    "weighted_distributions",
    "weighted_quantile",
    "EstimateReport",
    "bootstrap_se",
    "effect_by_decile",
    "fixed_effects_oracle",
    "wate",
    "MonteCarloCheck",
    "NormalDensity",
    "OptimalityScan",
    "ScenarioSpec",
    "TabulatedDensity",
    "VarianceResult",
    "benchmark_scenarios",
    "implied_propensity",
    "load_scenarios",
    "monte_carlo_check",
    "optimality_scan",
    "relative_variance",
    "variance_table",
    "__version__",
]
