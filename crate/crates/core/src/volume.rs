//! 4D voxel time series and 3D masks.

use crate::tensor::{ShapeError, Tensor};

/// One subject's scan, shaped `(T, Z, Y, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    tensor: Tensor<f32>,
}

impl Volume4D {
    pub fn new(tensor: Tensor<f32>) -> Result<Self, ShapeError> {
        tensor.expect_rank(4)?;
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn n_timepoints(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }

    pub fn n_voxels(&self) -> usize {
        self.grid().iter().product()
    }

    /// Time series of the voxel with linear index `v`, widened to f64.
    pub fn series(&self, v: usize) -> Vec<f64> {
        let nv = self.n_voxels();
        (0..self.n_timepoints())
            .map(|t| self.tensor.data()[t * nv + v] as f64)
            .collect()
    }

    /// Masked voxels as a voxel-major `V x T` row-major buffer.
    pub fn masked_series(&self, mask: &Mask) -> Vec<f64> {
        let nt = self.n_timepoints();
        let nv = self.n_voxels();
        let data = self.tensor.data();
        let mut out = vec![0.0; mask.count() * nt];
        for (row, &v) in mask.indices().iter().enumerate() {
            for t in 0..nt {
                out[row * nt + t] = data[t * nv + v] as f64;
            }
        }
        out
    }

    /// Masked voxels as a time-major `T x V` row-major buffer.
    pub fn masked_time_major(&self, mask: &Mask) -> Vec<f64> {
        let nt = self.n_timepoints();
        let nv = self.n_voxels();
        let data = self.tensor.data();
        let idx = mask.indices();
        let mut out = Vec::with_capacity(nt * idx.len());
        for t in 0..nt {
            out.extend(idx.iter().map(|&v| data[t * nv + v] as f64));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }
}

/// Boolean selection of voxels on a 3D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: [usize; 3],
    inside: Vec<bool>,
    indices: Vec<usize>,
}

impl Mask {
    pub fn from_bools(grid: [usize; 3], inside: Vec<bool>) -> Result<Self, ShapeError> {
        let n: usize = grid.iter().product();
        if inside.len() != n {
            return Err(ShapeError::Length {
                shape: grid.to_vec(),
                len: inside.len(),
            });
        }
        let indices = inside
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        Ok(Self {
            grid,
            inside,
            indices,
        })
    }

    pub fn full(grid: [usize; 3]) -> Self {
        Self::from_bools(grid, vec![true; grid.iter().product()]).expect("sized")
    }

    /// Voxels whose time series is non-constant in at least one volume.
    pub fn from_volumes<'a>(volumes: impl IntoIterator<Item = &'a Volume4D>) -> Option<Self> {
        let mut grid = None;
        let mut inside: Vec<bool> = Vec::new();
        for vol in volumes {
            let g = vol.grid();
            match grid {
                None => {
                    grid = Some(g);
                    inside = vec![false; vol.n_voxels()];
                }
                Some(prev) if prev != g => return None,
                _ => {}
            }
            let nv = vol.n_voxels();
            let data = vol.tensor().data();
            for (v, flag) in inside.iter_mut().enumerate() {
                if *flag {
                    continue;
                }
                let first = data[v];
                *flag = (1..vol.n_timepoints()).any(|t| data[t * nv + v] != first);
            }
        }
        grid.map(|g| Self::from_bools(g, inside).expect("sized"))
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.inside[v]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &self.grid,
            self.inside
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("sized")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, ShapeError> {
        t.expect_rank(3)?;
        let s = t.shape();
        Self::from_bools(
            [s[0], s[1], s[2]],
            t.data().iter().map(|&v| v != 0.0).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_from_volumes_drops_constant_voxels() {
        let mut t = Tensor::<f32>::zeros(&[3, 1, 1, 2]);
        t.data_mut()[0] = 1.0;
        let vol = Volume4D::new(t).unwrap();
        let m = Mask::from_volumes([&vol]).unwrap();
        assert_eq!(m.indices(), &[0]);
    }

    #[test]
    fn masked_layouts_agree() {
        let t = Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let vol = Volume4D::new(t).unwrap();
        let m = Mask::from_bools([1, 2, 2], vec![true, false, true, true]).unwrap();
        let vm = vol.masked_series(&m);
        let tm = vol.masked_time_major(&m);
        assert_eq!(vm, vec![0.0, 4.0, 2.0, 6.0, 3.0, 7.0]);
        assert_eq!(tm, vec![0.0, 2.0, 3.0, 4.0, 6.0, 7.0]);
        assert_eq!(vol.series(2), vec![2.0, 6.0]);
    }
}
