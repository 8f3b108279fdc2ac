use rand::Rng;

use super::LayerError;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(
    input: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    grad.expect_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec(input.shape(), data)?)
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real>(shape: &[usize], p: f64, seed: u64, stream: u64) -> Tensor<T> {
    assert!(
        (0.0..1.0).contains(&p),
        "dropout probability must lie in [0, 1)"
    );
    let keep = T::of(1.0 / (1.0 - p));
    let mut r = rng::stream(seed, stream);
    Tensor::from_fn(shape, |_| {
        if p > 0.0 && r.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

pub fn dropout_forward<T: Real>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    mul(x, mask)
}

pub fn dropout_backward<T: Real>(
    grad: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    mul(grad, mask)
}

fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    a.expect_shape(b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_vec(a.shape(), data)?)
}

/// Residual merge: `acc += other`.
pub fn add_in_place<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<(), LayerError> {
    Ok(acc.add_assign(other)?)
}
