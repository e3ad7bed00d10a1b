//! Accuracy / average-precision metrics and the evaluation harnesses.

pub mod harness;
pub mod metrics;

pub use harness::{
    ablation_suite, evaluate, report_from_scores, robustness_sweep, score_manifest, AblationRow, EvalReport,
    RobustnessCell, SourceMetrics, GRID_K_SELECT, GRID_PATCH_N,
};
pub use metrics::{accuracy_metrics, average_precision, AccuracyMetrics, ScoredExample};
