use super::LayerError;

/// `(1/2N) Σ (pred - target)²` and its gradient `(pred - target) / N`.
pub fn euclidean_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), LayerError> {
    if pred.len() != target.len() {
        return Err(LayerError::Length(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(LayerError::Empty);
    }
    let n = pred.len() as f64;
    let resid: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * n);
    Ok((loss, resid.into_iter().map(|r| r / n).collect()))
}
