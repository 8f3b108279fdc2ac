//! Per-channel batch normalization over `(N, Z, Y, X)`.
//!
//! Also accepts `(N, D)` input, treating each feature as a channel.

use super::{LayerError, LayerParams, Mode};
use crate::tensor::{Real, ShapeError, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running averages at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: Mode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize), ShapeError> {
    if shape.len() < 2 {
        return Err(ShapeError::Rank {
            expected: 5,
            found: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Batch statistics of one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased estimate, as folded into the running variance.
    pub unbiased_var: Vec<f64>,
}

/// In training mode uses batch statistics (biased variance) and folds them
/// into the running averages; eval mode uses the running averages.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>), LayerError> {
    let (out, cache, stats) = batchnorm_apply(input, params, mode)?;
    if let Some(stats) = stats {
        update_running_stats(params, &stats)?;
    }
    Ok((out, cache))
}

/// `running = 0.9 * running + 0.1 * batch`.
pub fn update_running_stats<T: Real>(
    params: &mut LayerParams<T>,
    stats: &BatchStats,
) -> Result<(), LayerError> {
    let state = params.bn.as_mut().ok_or(LayerError::BnUninitialized)?;
    if stats.mean.len() != state.running_mean.len() {
        return Err(LayerError::Length(
            stats.mean.len(),
            state.running_mean.len(),
        ));
    }
    let k = T::of(BN_MOMENTUM);
    for ch in 0..stats.mean.len() {
        state.running_mean[ch] =
            k * state.running_mean[ch] + (T::one() - k) * T::of(stats.mean[ch]);
        state.running_var[ch] =
            k * state.running_var[ch] + (T::one() - k) * T::of(stats.unbiased_var[ch]);
    }
    state.updates += 1;
    Ok(())
}

/// Pure forward pass. In training mode also returns the batch statistics
/// for [`update_running_stats`].
pub fn batchnorm_apply<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>, Option<BatchStats>), LayerError> {
    let (n, c, s) = layout(input.shape())?;
    params.weights.expect_shape(&[c])?;
    let gamma = params.weights.data();
    let zeros = vec![T::zero(); c];
    let beta = match &params.bias {
        Some(b) => {
            b.expect_shape(&[c])?;
            b.data()
        }
        None => &zeros[..],
    };
    let state = params.bn.as_ref().ok_or(LayerError::BnUninitialized)?;
    if n == 0 || s == 0 {
        return Err(LayerError::Empty);
    }
    let eps = T::of(BN_EPS);
    let m = (n * s) as f64;
    let x = input.data();

    let mut stats = None;
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mut batch = BatchStats {
                mean: vec![0.0; c],
                unbiased_var: vec![0.0; c],
            };
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..n {
                    let o = (i * c + ch) * s;
                    acc += x[o..o + s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = acc / m;
                let mut sq = 0.0f64;
                for i in 0..n {
                    let o = (i * c + ch) * s;
                    sq += x[o..o + s]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::of(mu);
                var[ch] = T::of(sq / m);
                batch.mean[ch] = mu;
                batch.unbiased_var[ch] = if m > 1.0 { sq / (m - 1.0) } else { 0.0 };
            }
            stats = Some(batch);
            (mean, var)
        }
        Mode::Eval => {
            if state.updates == 0 {
                return Err(LayerError::BnUninitialized);
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let xh = normalized.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * s;
                for j in o..o + s {
                    xh[j] = (x[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
    }
    {
        let xh = normalized.data();
        let y = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * s;
                for j in o..o + s {
                    y[j] = gamma[ch] * xh[j] + beta[ch];
                }
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode,
            normalized,
            inv_std,
        },
        stats,
    ))
}

/// Accumulates scale and shift gradients into `params` and returns the
/// input gradient.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    params: &mut LayerParams<T>,
    cache: &BnCache<T>,
) -> Result<Tensor<T>, LayerError> {
    grad_out.expect_shape(cache.normalized.shape())?;
    let (n, c, s) = layout(grad_out.shape())?;
    let m = T::of((n * s) as f64);
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let gamma = params.weights.data().to_vec();
    let mut dx = Tensor::zeros(grad_out.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for i in 0..n {
            let o = (i * c + ch) * s;
            for j in o..o + s {
                sum_dy += dy[j];
                sum_dy_xh += dy[j] * xh[j];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let g = gamma[ch] * cache.inv_std[ch];
        let out = dx.data_mut();
        for i in 0..n {
            let o = (i * c + ch) * s;
            for j in o..o + s {
                out[j] = match cache.mode {
                    Mode::Train => g * (dy[j] - sum_dy / m - xh[j] * sum_dy_xh / m),
                    Mode::Eval => g * dy[j],
                };
            }
        }
    }
    for (a, b) in params.grad_weights.data_mut().iter_mut().zip(&dgamma) {
        *a += *b;
    }
    if let Some(gb) = params.grad_bias.as_mut() {
        for (a, b) in gb.data_mut().iter_mut().zip(&dbeta) {
            *a += *b;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        // per channel: values -1, 1 (mean 0, biased var 1)
        let x = Tensor::<f64>::from_vec(&[2, 2, 1, 1, 1], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let mut p = LayerParams::batchnorm(2);
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::full(&[3, 1, 2, 2, 2], 4.2);
        let mut p = LayerParams::batchnorm(1);
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        let mut p = LayerParams::batchnorm(1);
        assert_eq!(
            batchnorm_forward(&x, &mut p, Mode::Eval).unwrap_err(),
            LayerError::BnUninitialized
        );
        batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(batchnorm_forward(&x, &mut p, Mode::Eval).is_ok());
    }

    #[test]
    fn running_statistics_use_momentum() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut p = LayerParams::batchnorm(1);
        batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let st = p.bn.as_ref().unwrap();
        // batch mean 2, unbiased variance 2
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_averages() {
        let mut p = LayerParams::<f64>::batchnorm(1);
        p.bn = Some(super::super::BnState {
            running_mean: vec![1.0],
            running_var: vec![4.0 - BN_EPS],
            updates: 1,
        });
        let x = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![5.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Eval).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }
}
