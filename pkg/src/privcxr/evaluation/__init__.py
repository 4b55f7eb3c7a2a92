from privcxr.evaluation.metrics import (
    BootstrapResult,
    Confusion,
    UndefinedMetricError,
    YoudenResult,
    auroc,
    bootstrap,
    confusion_metrics,
    pearson_r,
    spearman_rho,
    statistical_parity_difference,
    youden_threshold,
)
from privcxr.evaluation.reports import (
    FairnessReport,
    MetricReport,
    PredictionSet,
    evaluate_predictions,
    subgroup_report,
)

__all__ = [
    "BootstrapResult",
    "Confusion",
    "FairnessReport",
    "MetricReport",
    "PredictionSet",
    "UndefinedMetricError",
    "YoudenResult",
    "auroc",
    "bootstrap",
    "confusion_metrics",
    "evaluate_predictions",
    "pearson_r",
    "spearman_rho",
    "statistical_parity_difference",
    "subgroup_report",
    "youden_threshold",
]
