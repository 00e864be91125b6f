//! Classification and detection metrics, significance testing and reports.

mod classification;
mod detection;
mod plot;
mod report;
mod wilcoxon;

pub use classification::{
    auprc, classification_metrics, mann_whitney_auc, roc_auc, samples_from, trapezoid, ClassificationMetrics,
    Confusion, CurvePoint, ScoredSample,
};
pub use detection::{
    froc, is_hit, match_detections, FrocCurve, FrocImage, GroundTruth, MatchResult, ScoredBox, MATCH_IOU,
};
pub use plot::{write_curve_csv, write_text, Chart};
pub use report::{build_report, MetricsReport, ModelMetrics, ModelPredictions, DEFAULT_THRESHOLD};
pub use wilcoxon::{average_ranks, wilcoxon_signed_rank, WilcoxonResult, EXACT_LIMIT, MIN_PAIRS};
