//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are `(N, C, Z, Y, X)` tensors for the convolutional part and
//! `(N, D)` for the fully connected part. Every backward function returns
//! exact gradients of its forward map.

mod activation;
mod batchnorm;
mod checkpoint;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{
    add_in_place, dropout_backward, dropout_forward, dropout_mask, relu, relu_backward,
};
pub use batchnorm::{
    batchnorm_apply, batchnorm_backward, batchnorm_forward, update_running_stats, BatchStats,
    BnCache, BN_EPS, BN_MOMENTUM,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, INDEX_FILE};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use loss::euclidean_loss;
pub use pool::{maxpool3d, maxpool3d_backward, pooled_grid, PoolCache};

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("batch norm running statistics are undefined before the first training step")]
    BnUninitialized,
    #[error("kernel extent {0} must be odd")]
    EvenKernel(usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Number of training-mode forward passes folded into the averages.
    pub updates: u64,
}

/// Learnable tensors of one layer plus same-shaped gradient accumulators.
///
/// For batch norm `weights` is the per-channel scale and `bias` the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
    pub bn: Option<BnState<T>>,
}

impl<T: Real> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Self {
            weights,
            bias,
            grad_weights,
            grad_bias,
            bn: None,
        }
    }

    /// Scale 1, shift 0, running mean 0 and variance 1 (not yet usable in eval).
    pub fn batchnorm(channels: usize) -> Self {
        let mut p = Self::new(
            Tensor::full(&[channels], T::one()),
            Some(Tensor::zeros(&[channels])),
        );
        p.bn = Some(BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            updates: 0,
        });
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(T::zero());
        if let Some(g) = self.grad_bias.as_mut() {
            g.fill(T::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        LayerParams {
            weights: self.weights.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            grad_weights: self.grad_weights.cast(),
            grad_bias: self.grad_bias.as_ref().map(|b| b.cast()),
            bn: self.bn.as_ref().map(|s| BnState {
                running_mean: conv(&s.running_mean),
                running_var: conv(&s.running_var),
                updates: s.updates,
            }),
        }
    }
}

pub(crate) fn spatial(shape: &[usize]) -> Result<(usize, usize, [usize; 3]), ShapeError> {
    if shape.len() != 5 {
        return Err(ShapeError::Rank {
            expected: 5,
            found: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]]))
}
