//! Epoch-level fusion of sequence posteriors, staging metrics, study tables
//! and the personalize-or-not gate.

mod fusion;
mod metrics;
mod report;

use thiserror::Error;

use crate::model::ModelError;
use crate::preprocessing::PreprocessError;

pub use fusion::{aggregate_epoch_posteriors, score_night, FusedEpoch, FusionMode, NightScore};
pub use metrics::{compute_metrics, ClassMetrics, ConfusionMatrix, MetricsReport};
pub use report::{
    curve_key, experiment_report, format_table, mean_std, personalization_gate, read_report_csv, write_report_csv,
    CurvePoint, GateGroup, GroupSummary, ReportRow, ScatterPoint, StudyReport, TableRow, DEFAULT_BETA, METRIC_NAMES,
    SI_STRATEGY,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("epoch {epoch} is not covered by any sequence")]
    Uncovered { epoch: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("inconsistent snapshot grids: {0}")]
    InconsistentGrid(String),
    #[error("no personalization runs to report")]
    NoRuns,
    #[error("report CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}
