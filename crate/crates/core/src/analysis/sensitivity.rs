//! Channel-ablation sensitivity and its principal components.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::eigen::symmetric_eigen;
use super::AnalysisError;
use crate::cnn::{stack, AgeCnn};
use crate::fc::FcImage;
use crate::tensor::Tensor;

/// Anything that maps a batch of `(K, Z, Y, X)` images to ages.
pub trait AgePredictor {
    fn predict_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<f64>, AnalysisError>;
}

/// Images per forward pass when predicting many subjects.
const PREDICT_CHUNK: usize = 16;

impl AgePredictor for AgeCnn<f32> {
    fn predict_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<f64>, AnalysisError> {
        if !self.is_trained() {
            return Err(AnalysisError::Untrained);
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            out.extend(self.predict(&stack(chunk))?);
        }
        Ok(out)
    }
}

/// `values[(i, s)]` = prediction for subject `s` minus the prediction with
/// channel `i` set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMatrix {
    pub values: Array2<f64>,
}

pub fn sensitivity_change_matrix(
    model: &dyn AgePredictor,
    images: &[&FcImage],
) -> Result<ChangeMatrix, AnalysisError> {
    if images.is_empty() {
        return Err(AnalysisError::Empty("test set"));
    }
    let n = images[0].channels();
    if images.iter().any(|im| im.channels() != n) {
        return Err(AnalysisError::Dimension(
            "images differ in channel count".into(),
        ));
    }
    let full = model.predict_images(&images.iter().map(|im| &im.data).collect::<Vec<_>>())?;
    let mut values = Array2::zeros((n, images.len()));
    for ch in 0..n {
        let ablated: Vec<FcImage> = images.iter().map(|im| im.with_channel_zeroed(ch)).collect();
        let preds = model.predict_images(&ablated.iter().map(|im| &im.data).collect::<Vec<_>>())?;
        for (s, (f, p)) in full.iter().zip(&preds).enumerate() {
            values[[ch, s]] = f - p;
        }
    }
    Ok(ChangeMatrix { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPca {
    /// Channels ordered by |loading| on the first component, most sensitive first.
    pub ranking: Vec<usize>,
    /// Loadings of the first component, one per channel.
    pub pc1_loadings: Vec<f64>,
    /// Eigenvalues of the channel covariance, descending.
    pub explained_variance: Vec<f64>,
    /// All components as rows (`components[c][i]` = loading of channel i).
    pub components: Vec<Vec<f64>>,
}

/// PCA over channels: each row of the change matrix is centered across
/// subjects and the `n × n` covariance is eigendecomposed.
pub fn sensitivity_pca(cm: &ChangeMatrix, top_k: usize) -> Result<SensitivityPca, AnalysisError> {
    let (n, subjects) = cm.values.dim();
    if subjects < 2 {
        return Err(AnalysisError::Empty("need at least 2 subjects"));
    }
    if n < top_k {
        return Err(AnalysisError::Dimension(format!(
            "top_k {top_k} exceeds channel count {n}"
        )));
    }
    let mut c = cm.values.clone();
    for mut row in c.rows_mut() {
        let m = row.sum() / subjects as f64;
        row.mapv_inplace(|v| v - m);
    }
    let cov = c.dot(&c.t()) / (subjects as f64 - 1.0);
    let (vals, vecs) = symmetric_eigen(&cov);
    let pc1: Vec<f64> = vecs.column(0).to_vec();
    let peak = pc1.iter().map(|v| v.abs()).fold(0.0, f64::max);
    // Quantize magnitudes so loadings equal up to rounding tie exactly and
    // fall back to the lower channel index.
    let key = |i: usize| {
        if peak == 0.0 {
            0
        } else {
            (pc1[i].abs() / peak * 1e9).round() as i64
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (-key(i), i));
    order.truncate(top_k);
    Ok(SensitivityPca {
        ranking: order,
        pc1_loadings: pc1,
        explained_variance: vals.iter().map(|&v| v.max(0.0)).collect(),
        components: (0..n).map(|j| vecs.column(j).to_vec()).collect(),
    })
}
