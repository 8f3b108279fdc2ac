//! 2×2×2 max pooling with stride 2.
//!
//! Odd extents are padded up to even; padded cells are never selected, so
//! a window hanging off the edge pools only its real voxels.

use super::{spatial, LayerError};
use crate::tensor::{idx3, Real, Tensor};

/// Input shape and, per output cell, the winning input offset within the
/// sample-channel slab.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

pub fn pooled_grid(g: [usize; 3]) -> [usize; 3] {
    g.map(|e| e.div_ceil(2))
}

pub fn maxpool3d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache), LayerError> {
    let (n, c, g) = spatial(input.shape())?;
    if g.contains(&0) {
        return Err(LayerError::Empty);
    }
    let og = pooled_grid(g);
    let (p, op) = (g.iter().product::<usize>(), og.iter().product::<usize>());
    let mut out = Vec::with_capacity(n * c * op);
    let mut argmax = Vec::with_capacity(n * c * op);
    for slab in input.data().chunks(p) {
        for z in 0..og[0] {
            for y in 0..og[1] {
                for x in 0..og[2] {
                    let mut best: Option<(usize, T)> = None;
                    // Scan in increasing linear index; strict comparison keeps
                    // the lowest index among ties.
                    for dz in 0..2 {
                        let iz = 2 * z + dz;
                        if iz >= g[0] {
                            continue;
                        }
                        for dy in 0..2 {
                            let iy = 2 * y + dy;
                            if iy >= g[1] {
                                continue;
                            }
                            for dx in 0..2 {
                                let ix = 2 * x + dx;
                                if ix >= g[2] {
                                    continue;
                                }
                                let i = idx3(g, iz, iy, ix);
                                let v = slab[i];
                                if best.is_none_or(|(_, b)| v > b) {
                                    best = Some((i, v));
                                }
                            }
                        }
                    }
                    let (i, v) = best.expect("window has a real voxel");
                    out.push(v);
                    argmax.push(i as u32);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, og[0], og[1], og[2]], out)?,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &PoolCache,
) -> Result<Tensor<T>, LayerError> {
    let (n, c, g) = spatial(&cache.input_shape)?;
    let og = pooled_grid(g);
    grad_out.expect_shape(&[n, c, og[0], og[1], og[2]])?;
    let (p, op) = (g.iter().product::<usize>(), og.iter().product::<usize>());
    let mut gx = Tensor::zeros(&cache.input_shape);
    for (s, (dst, src)) in gx
        .data_mut()
        .chunks_mut(p)
        .zip(grad_out.data().chunks(op))
        .enumerate()
    {
        let arg = &cache.argmax[s * op..(s + 1) * op];
        for (&a, &gv) in arg.iter().zip(src) {
            dst[a as usize] += gv;
        }
    }
    Ok(gx)
}
