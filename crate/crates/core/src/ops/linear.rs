use ndarray::linalg::general_mat_mul;
use ndarray::ArrayViewMut2;

use super::{LayerError, LayerParams};
use crate::tensor::{Real, Tensor};

/// `(N, D) -> (N, O)` with weights `(O, D)`: `y = x Wᵀ + b`.
pub fn fully_connected<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<Tensor<T>, LayerError> {
    let x = input.as_matrix()?;
    let w = params.weights.as_matrix()?;
    let (n, d) = x.dim();
    let o = w.nrows();
    if w.ncols() != d {
        return Err(LayerError::Length(w.ncols(), d));
    }
    let mut out = Tensor::zeros(&[n, o]);
    {
        let mut y = out.as_matrix_mut()?;
        general_mat_mul(T::one(), &x, &w.t(), T::zero(), &mut y);
        if let Some(b) = &params.bias {
            b.expect_shape(&[o])?;
            for mut row in y.rows_mut() {
                row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>, LayerError> {
    let x = input.as_matrix()?;
    let w = params.weights.as_matrix()?;
    let (n, d) = x.dim();
    let o = w.nrows();
    grad_out.expect_shape(&[n, o])?;
    let g = grad_out.as_matrix()?;
    let mut gw = vec![T::zero(); o * d];
    general_mat_mul(
        T::one(),
        &g.t(),
        &x,
        T::zero(),
        &mut ArrayViewMut2::from_shape((o, d), &mut gw).expect("sized"),
    );
    let mut gx = vec![T::zero(); n * d];
    general_mat_mul(
        T::one(),
        &g,
        &w,
        T::zero(),
        &mut ArrayViewMut2::from_shape((n, d), &mut gx).expect("sized"),
    );
    let gb: Vec<T> = (0..o).map(|j| g.column(j).iter().copied().sum()).collect();
    Ok(LinearGrads {
        input: Tensor::from_vec(&[n, d], gx)?,
        weights: Tensor::from_vec(&[o, d], gw)?,
        bias: Tensor::from_vec(&[o], gb)?,
    })
}
