//! Cross-validation folds, metrics, sensitivity analysis and embeddings.

mod eigen;
mod folds;
mod sensitivity;
mod tsne;

pub use eigen::symmetric_eigen;
pub use folds::{assign_folds, make_folds, FoldAssignment, FoldError, STRATA};
pub use sensitivity::{
    sensitivity_change_matrix, sensitivity_pca, AgePredictor, ChangeMatrix, SensitivityPca,
};
pub use tsne::{pca_reduce, silhouette, tsne_embed, TsneConfig, TsneResult, DIST_JITTER};

use serde::{Deserialize, Serialize};

use crate::cnn::NetError;
use crate::fc::pearson_unchecked;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0}")]
    Empty(&'static str),
    #[error("{0}")]
    Dimension(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("model has not been trained (batch-norm statistics undefined)")]
    Untrained,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r: f64,
    pub mae: f64,
}

/// Pearson correlation and mean absolute error of predictions.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics, AnalysisError> {
    if pred.len() != truth.len() {
        return Err(AnalysisError::Length(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(AnalysisError::Empty("metrics need at least 2 subjects"));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(Metrics {
        r: pearson_unchecked(pred, truth),
        mae,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
