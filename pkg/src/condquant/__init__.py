"""Distribution-free confidence intervals for conditional medians and quantiles.

The estimators follow the familiar fit/predict pattern: a conformity score
is trained on one half of the data, calibrated on the other half through
order statistics of the scores, and the resulting thresholds convert into
an interval at any covariate point.  Coverage holds in finite samples for
any data distribution and any regression backend, including a useless one;
accuracy of the backend only affects interval width.
"""

from .conformal import (
    ARTIFACT_VERSION,
    ConformalMedian,
    ConformalQuantile,
    UncalibratedQuantileBand,
    UnconditionalMedianResult,
    median_order_rank,
    thaw,
    unconditional_median_interval,
)
from .distributions import DISTRIBUTIONS, make_distribution, two_atom_quantile
from .evaluation import (
    DEFAULT_SEED,
    CellMetrics,
    CellResult,
    ExperimentOutcome,
    TrialConfig,
    TrialReport,
    binomial_se,
    overcoverage_experiment,
    overcoverage_floor_n2,
    predictive_audit,
    quantile_audit,
    run_trials,
    sharpness_experiment,
    write_metrics,
    write_reports,
)
from .forest import QuantileForest
from .intervals import (
    ABOVE_RANGE,
    BELOW_RANGE,
    Interval,
    QuantileSpec,
    kth_smallest,
    lower_calibration_index,
    upper_calibration_index,
)
from .neighbors import KNNQuantileBackend
from .scores import (
    BACKENDS,
    SCORES,
    CdfScore,
    CqrScore,
    LogScore,
    NormalizedScore,
    RandomizedScore,
    ResidualScore,
    ZeroScore,
    make_score,
)

__version__ = "0.1.0"

__all__ = [
    "ABOVE_RANGE",
    "ARTIFACT_VERSION",
    "BACKENDS",
    "BELOW_RANGE",
    "CdfScore",
    "CellMetrics",
    "CellResult",
    "ConformalMedian",
    "ConformalQuantile",
    "CqrScore",
    "DEFAULT_SEED",
    "DISTRIBUTIONS",
    "ExperimentOutcome",
    "Interval",
    "KNNQuantileBackend",
    "LogScore",
    "NormalizedScore",
    "QuantileForest",
    "QuantileSpec",
    "RandomizedScore",
    "ResidualScore",
    "SCORES",
    "TrialConfig",
    "TrialReport",
    "UncalibratedQuantileBand",
    "UnconditionalMedianResult",
    "ZeroScore",
    "binomial_se",
    "kth_smallest",
    "lower_calibration_index",
    "make_distribution",
    "make_score",
    "median_order_rank",
    "overcoverage_experiment",
    "overcoverage_floor_n2",
    "predictive_audit",
    "quantile_audit",
    "run_trials",
    "sharpness_experiment",
    "thaw",
    "two_atom_quantile",
    "unconditional_median_interval",
    "upper_calibration_index",
    "write_metrics",
    "write_reports",
]
