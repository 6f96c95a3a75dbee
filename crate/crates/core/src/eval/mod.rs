//! Evaluation protocol: stratified k-fold and holdout splits, confusion
//! matrices, per-class and aggregate metrics, and the cross-validation
//! driver.

mod crossval;
mod metrics;
mod split;

pub use crossval::{
    cross_validate, holdout_evaluate, holdout_evaluate_checkpoint, per_report_confusion,
    per_report_majority, CrossValReport, FoldReport, HoldoutReport,
};
pub use metrics::{compute_metrics, confusion, ClassMetrics, ConfusionMatrix, MetricsReport};
pub use split::{holdout_split, kfold_split, FoldSplit, HoldoutIndices};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("cannot split {n} samples into {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("{name} ratio {ratio} is positive but selects zero samples of {n}")]
    DegenerateSplit {
        name: &'static str,
        ratio: f64,
        n: usize,
    },
    #[error("confusion matrix has no samples")]
    EmptyConfusion,
    #[error("groups ({groups}) and labels ({labels}) differ in length")]
    GroupLengthMismatch { groups: usize, labels: usize },
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}
