//! Evaluation protocol: accuracy and AUC-ROC metrics, paired bootstrap,
//! exact Wilcoxon signed-rank tests, cross-validation aggregation and
//! best-group determination.

mod bootstrap;
mod compare;
mod metrics;
mod wilcoxon;

use thiserror::Error;

pub use bootstrap::{bootstrap_indices, bootstrap_metric, BOOTSTRAP_STREAM, MAX_REDRAWS, MAX_UNDEFINED_FRACTION};
pub use compare::{cv_aggregate, mean_std, significance_groups, ComparisonCell, BEST_GROUP_THRESHOLD};
pub use metrics::{accuracy, auc_binary, auc_ovo, auc_ovr};
pub use wilcoxon::{wilcoxon_signed_rank, EXACT_MAX_PAIRS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty prediction set")]
    Empty,
    #[error("{scores} score values for {labels} labels with {classes} columns")]
    ShapeMismatch { scores: usize, labels: usize, classes: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("score row {row} is invalid: {reason}")]
    InvalidScores { row: usize, reason: String },
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("paired inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("bootstrap: metric undefined on {undefined} of {draws} resamples")]
    TooManyUndefined { undefined: usize, draws: usize },
    #[error("bootstrap replicate {replicate} stayed undefined after {redraws} redraws")]
    RedrawLimit { replicate: usize, redraws: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Scores of one model on one test set.
///
/// `scores` is row-major `N x C`. `C = 1` is the binary case: the column is
/// P(label = 1) and labels are 0/1. For `C >= 2` rows are probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub columns: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub model_id: String,
    pub fold_id: u64,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl PredictionSet {
    pub fn new(
        columns: usize,
        scores: Vec<f64>,
        labels: Vec<usize>,
        model_id: impl Into<String>,
        fold_id: u64,
    ) -> Result<Self, EvalError> {
        if labels.is_empty() {
            return Err(EvalError::Empty);
        }
        if columns == 0 || scores.len() != labels.len() * columns {
            return Err(EvalError::ShapeMismatch {
                scores: scores.len(),
                labels: labels.len(),
                classes: columns,
            });
        }
        let classes = columns.max(2);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(EvalError::InvalidLabel { label, classes });
        }
        for (row, r) in scores.chunks_exact(columns).enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::InvalidScores {
                    row,
                    reason: "non-finite score".into(),
                });
            }
            if columns > 1 {
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(EvalError::InvalidScores {
                        row,
                        reason: format!("probabilities sum to {sum}"),
                    });
                }
            }
        }
        Ok(PredictionSet {
            columns,
            scores,
            labels,
            model_id: model_id.into(),
            fold_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of label classes (2 for the single-column binary case).
    pub fn classes(&self) -> usize {
        self.columns.max(2)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.columns..(i + 1) * self.columns]
    }

    /// Scores for class `k` as a column. In the binary case class 0 gets
    /// `1 - p`.
    pub fn class_scores(&self, k: usize) -> Vec<f64> {
        if self.columns == 1 {
            if k == 1 {
                self.scores.clone()
            } else {
                self.scores.iter().map(|p| 1.0 - p).collect()
            }
        } else {
            (0..self.len()).map(|i| self.scores[i * self.columns + k]).collect()
        }
    }

    /// Rows at `indices`, duplicates allowed.
    pub fn select(&self, indices: &[usize]) -> PredictionSet {
        let mut scores = Vec::with_capacity(indices.len() * self.columns);
        for &i in indices {
            scores.extend_from_slice(self.row(i));
        }
        PredictionSet {
            columns: self.columns,
            scores,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            model_id: self.model_id.clone(),
            fold_id: self.fold_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    /// Binary AUC-ROC on the positive-class score.
    Auc,
    AucOvr,
    AucOvo,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Auc => "auc",
            MetricKind::AucOvr => "auc_ovr",
            MetricKind::AucOvo => "auc_ovo",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            MetricKind::Accuracy,
            MetricKind::Auc,
            MetricKind::AucOvr,
            MetricKind::AucOvo,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }

    pub fn compute(self, pred: &PredictionSet) -> Result<f64, EvalError> {
        match self {
            MetricKind::Accuracy => Ok(accuracy(pred)),
            MetricKind::Auc => {
                let labels: Vec<bool> = pred.labels.iter().map(|&l| l == 1).collect();
                auc_binary(&pred.class_scores(1), &labels)
            }
            MetricKind::AucOvr => auc_ovr(pred),
            MetricKind::AucOvo => auc_ovo(pred),
        }
    }
}

/// Point estimate on the full test set plus its bootstrap distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricResult {
    pub point: f64,
    pub boot_mean: f64,
    pub boot_std: f64,
    pub replicates: Vec<f64>,
}
