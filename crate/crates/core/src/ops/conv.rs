//! Stride-1 "same" 3D convolution (cross-correlation) via im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::{spatial, LayerError, LayerParams};
use crate::tensor::{Real, ShapeError, Tensor};

fn kernel_dims<T: Real>(weights: &Tensor<T>) -> Result<(usize, usize, usize), LayerError> {
    let s = weights.shape();
    if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
        return Err(ShapeError::Rank {
            expected: 5,
            found: s.to_vec(),
        }
        .into());
    }
    if s[2].is_multiple_of(2) {
        return Err(LayerError::EvenKernel(s[2]));
    }
    Ok((s[0], s[1], s[2]))
}

/// Unfolds one sample `(C, Z, Y, X)` into a `(C*k^3, Z*Y*X)` matrix.
fn im2col<T: Real>(x: &[T], c: usize, g: [usize; 3], k: usize, col: &mut [T]) {
    let pad = k / 2;
    let p = g[0] * g[1] * g[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * p..(ci + 1) * p];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let x_lo = pad.saturating_sub(dx);
                    let x_hi = (g[2] + pad).saturating_sub(dx).min(g[2]);
                    for z in 0..g[0] {
                        let iz = z + dz;
                        for y in 0..g[1] {
                            let iy = y + dy;
                            let o = (z * g[1] + y) * g[2];
                            let out = &mut dst[o..o + g[2]];
                            if iz < pad || iz - pad >= g[0] || iy < pad || iy - pad >= g[1] {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = ((iz - pad) * g[1] + (iy - pad)) * g[2];
                            out[..x_lo].fill(T::zero());
                            if x_hi > x_lo {
                                let s0 = src + x_lo + dx - pad;
                                out[x_lo..x_hi].copy_from_slice(&xc[s0..s0 + (x_hi - x_lo)]);
                            }
                            out[x_hi.max(x_lo)..].fill(T::zero());
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `(C, Z, Y, X)`.
fn col2im<T: Real>(col: &[T], c: usize, g: [usize; 3], k: usize, x: &mut [T]) {
    let pad = k / 2;
    let p = g[0] * g[1] * g[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * p..(ci + 1) * p];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let src_row = &col[row * p..(row + 1) * p];
                    let x_lo = pad.saturating_sub(dx);
                    let x_hi = (g[2] + pad).saturating_sub(dx).min(g[2]);
                    for z in 0..g[0] {
                        let iz = z + dz;
                        if iz < pad || iz - pad >= g[0] {
                            continue;
                        }
                        for y in 0..g[1] {
                            let iy = y + dy;
                            if iy < pad || iy - pad >= g[1] || x_hi <= x_lo {
                                continue;
                            }
                            let o = (z * g[1] + y) * g[2];
                            let dst = ((iz - pad) * g[1] + (iy - pad)) * g[2] + x_lo + dx - pad;
                            for (d, s) in xc[dst..dst + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&src_row[o + x_lo..o + x_hi])
                            {
                                *d += *s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, f: usize) -> Result<(), LayerError> {
    if let Some(b) = bias {
        b.expect_shape(&[f])?;
    }
    Ok(())
}

/// `(N, C, Z, Y, X) -> (N, F, Z, Y, X)` with weights `(F, C, k, k, k)`,
/// zero padding `k / 2` and an optional per-filter bias.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<Tensor<T>, LayerError> {
    let (f, c, k) = kernel_dims(&params.weights)?;
    let (n, ci, g) = spatial(input.shape())?;
    if ci != c {
        return Err(ShapeError::Mismatch {
            expected: vec![n, c, g[0], g[1], g[2]],
            found: input.shape().to_vec(),
        }
        .into());
    }
    check_bias(params.bias.as_ref(), f)?;
    let p = g[0] * g[1] * g[2];
    let ck = c * k * k * k;
    let w = ArrayView2::from_shape((f, ck), params.weights.data()).expect("sized");
    let samples: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::zero(); ck * p];
            im2col(input.outer(i), c, g, k, &mut col);
            let colv = ArrayView2::from_shape((ck, p), &col).expect("sized");
            let mut out = vec![T::zero(); f * p];
            {
                let mut ov = ArrayViewMut2::from_shape((f, p), &mut out).expect("sized");
                general_mat_mul(T::one(), &w, &colv, T::zero(), &mut ov);
            }
            if let Some(b) = &params.bias {
                for (fi, chunk) in out.chunks_mut(p).enumerate() {
                    let bv = b.data()[fi];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        })
        .collect();
    let data = samples.concat();
    Ok(Tensor::from_vec(&[n, f, g[0], g[1], g[2]], data)?)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, LayerError> {
    let (f, c, k) = kernel_dims(&params.weights)?;
    let (n, ci, g) = spatial(input.shape())?;
    if ci != c {
        return Err(ShapeError::Mismatch {
            expected: vec![n, c, g[0], g[1], g[2]],
            found: input.shape().to_vec(),
        }
        .into());
    }
    grad_out.expect_shape(&[n, f, g[0], g[1], g[2]])?;
    let p = g[0] * g[1] * g[2];
    let ck = c * k * k * k;
    let w = ArrayView2::from_shape((f, ck), params.weights.data()).expect("sized");

    let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::zero(); ck * p];
            im2col(input.outer(i), c, g, k, &mut col);
            let colv = ArrayView2::from_shape((ck, p), &col).expect("sized");
            let go = ArrayView2::from_shape((f, p), grad_out.outer(i)).expect("sized");

            let mut gw = vec![T::zero(); f * ck];
            {
                let mut gwv = ArrayViewMut2::from_shape((f, ck), &mut gw).expect("sized");
                general_mat_mul(T::one(), &go, &colv.t(), T::zero(), &mut gwv);
            }
            let gb: Vec<T> = grad_out
                .outer(i)
                .chunks(p)
                .map(|ch| ch.iter().copied().sum())
                .collect();
            let mut gcol = vec![T::zero(); ck * p];
            {
                let mut gcv = ArrayViewMut2::from_shape((ck, p), &mut gcol).expect("sized");
                general_mat_mul(T::one(), &w.t(), &go, T::zero(), &mut gcv);
            }
            let mut gx = vec![T::zero(); c * p];
            col2im(&gcol, c, g, k, &mut gx);
            (gx, gw, gb)
        })
        .collect();

    let mut gw = vec![T::zero(); f * ck];
    let mut gb = vec![T::zero(); f];
    let mut gx = Vec::with_capacity(n * c * p);
    for (x, w_i, b_i) in per {
        gx.extend_from_slice(&x);
        gw.iter_mut().zip(&w_i).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(&b_i).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(params.weights.shape(), gw)?,
        bias: Tensor::from_vec(&[f], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::idx3;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 0);
        Tensor::from_fn(shape, |_| r.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct nested-loop convolution.
    fn brute_force(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (n, c, g) = spatial(x.shape()).unwrap();
        let (f, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, f, g[0], g[1], g[2]]);
        for i in 0..n {
            for fo in 0..f {
                for z in 0..g[0] {
                    for y in 0..g[1] {
                        for xx in 0..g[2] {
                            let mut acc = b[fo];
                            for ci in 0..c {
                                for dz in 0..k {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let iz = z as isize + dz as isize - pad;
                                            let iy = y as isize + dy as isize - pad;
                                            let ix = xx as isize + dx as isize - pad;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= g[0] as isize
                                                || iy >= g[1] as isize
                                                || ix >= g[2] as isize
                                            {
                                                continue;
                                            }
                                            let xv = x.outer(i)[ci * g.iter().product::<usize>()
                                                + idx3(g, iz as usize, iy as usize, ix as usize)];
                                            let wv = w.data()
                                                [(((fo * c + ci) * k + dz) * k + dy) * k + dx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.outer_mut(i)
                                [fo * g.iter().product::<usize>() + idx3(g, z, y, xx)] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random(&[1, 1, 4, 3, 5], 1);
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0;
        let p = LayerParams::new(w, Some(Tensor::zeros(&[1])));
        let y = conv3d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3, 3, 3]);
        let p = LayerParams::new(
            random(&[2, 3, 3, 3, 3], 2),
            Some(Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap()),
        );
        let y = conv3d_forward(&x, &p).unwrap();
        for i in 0..2 {
            let s = y.outer(i);
            assert!(s[..27].iter().all(|&v| v == 0.5));
            assert!(s[27..].iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn matches_nested_loops() {
        let x = random(&[1, 2, 3, 3, 3], 3);
        let w = random(&[1, 2, 3, 3, 3], 4);
        let p = LayerParams::new(w.clone(), Some(Tensor::from_vec(&[1], vec![0.25]).unwrap()));
        let got = conv3d_forward(&x, &p).unwrap();
        let want = brute_force(&x, &w, &[0.25]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        // non-cubic grid, two samples, 1x1x1 kernel
        let x = random(&[2, 3, 2, 4, 5], 5);
        let w = random(&[4, 3, 1, 1, 1], 6);
        let p = LayerParams::new(w.clone(), None);
        let got = conv3d_forward(&x, &p).unwrap();
        let want = brute_force(&x, &w, &[0.0; 4]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let x = random(&[1, 2, 3, 3, 3], 7);
        let p = LayerParams::new(random(&[2, 2, 3, 3, 3], 8), Some(Tensor::zeros(&[2])));
        let g = conv3d_backward(&x, &p, &Tensor::zeros(&[1, 2, 3, 3, 3])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_hand_derivative() {
        // On a 1x1x1 grid only the kernel centre touches real data:
        // y = w_c * x + b, so dy/dx = w_c, dy/dw_c = x, dy/db = 1.
        let x = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![3.0]).unwrap();
        let w = random(&[1, 1, 3, 3, 3], 9);
        let p = LayerParams::new(w.clone(), Some(Tensor::zeros(&[1])));
        let g = conv3d_backward(&x, &p, &Tensor::full(&[1, 1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.input.data(), &[w.data()[13]]);
        assert_eq!(g.bias.data(), &[1.0]);
        for (i, &v) in g.weights.data().iter().enumerate() {
            assert_eq!(v, if i == 13 { 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]);
        let p = LayerParams::new(Tensor::zeros(&[1, 3, 3, 3, 3]), None);
        assert!(conv3d_forward(&x, &p).is_err());
        let p = LayerParams::new(Tensor::zeros(&[1, 2, 2, 2, 2]), None);
        assert!(matches!(
            conv3d_forward(&x, &p),
            Err(LayerError::EvenKernel(2))
        ));
    }
}
