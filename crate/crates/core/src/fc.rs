//! Voxel-wise and inter-ICN functional connectivity.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::icn::IcnSet;
use crate::tensor::{idx3, Tensor};
use crate::volume::{Mask, Volume4D};

/// Correlations are clamped to `[-1 + EPS, 1 - EPS]` before `atanh`.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FcError {
    #[error("series length {0} is below 3")]
    TooShort(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("correlation {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least 2 components, have {0}")]
    TooFewComponents(usize),
}

/// Sample Pearson correlation (two-pass); 0 when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, FcError> {
    if x.len() != y.len() {
        return Err(FcError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(FcError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FcError::NonFinite);
    }
    Ok(pearson_unchecked(x, y))
}

pub(crate) fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn fisher_z(r: f64) -> Result<f64, FcError> {
    if !r.is_finite() {
        return Err(FcError::NonFinite);
    }
    if r.abs() > 1.0 {
        return Err(FcError::OutOfRange(r));
    }
    Ok(clamped_atanh(r))
}

#[inline]
fn clamped_atanh(r: f64) -> f64 {
    r.clamp(-1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS).atanh()
}

/// Largest magnitude a Fisher-z value can take.
pub fn z_limit() -> f64 {
    (1.0 - CLAMP_EPS).atanh()
}

/// Whether FC is computed on the native grid and then averaged, or the
/// volume is averaged first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FcOrder {
    #[default]
    FcThenDownsample,
    DownsampleThenFc,
}

/// K-channel Fisher-z maps, `(K, Z, Y, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcImage {
    pub data: Tensor<f32>,
    pub channel_order: Vec<usize>,
}

impl FcImage {
    pub fn from_tensor(data: Tensor<f32>) -> Result<Self, FcError> {
        if data.ndim() != 4 {
            return Err(FcError::Dimension(format!(
                "FC image must be 4-d, got {:?}",
                data.shape()
            )));
        }
        let k = data.shape()[0];
        Ok(Self {
            data,
            channel_order: (0..k).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy with channel `c` set to zero.
    pub fn with_channel_zeroed(&self, c: usize) -> Self {
        let mut out = self.clone();
        out.data.outer_mut(c).fill(0.0);
        out
    }
}

/// Block-mean downsampling of a `(C, Z, Y, X)` tensor; partial blocks are
/// zero-padded, so the divisor is always the full block volume.
pub fn block_mean(input: &Tensor<f64>, factors: [usize; 3]) -> Tensor<f64> {
    let s = input.shape();
    let (c, grid) = (s[0], [s[1], s[2], s[3]]);
    if factors == [1, 1, 1] {
        return input.clone();
    }
    let out_grid = [
        grid[0].div_ceil(factors[0]),
        grid[1].div_ceil(factors[1]),
        grid[2].div_ceil(factors[2]),
    ];
    let block = (factors[0] * factors[1] * factors[2]) as f64;
    let mut out = Tensor::zeros(&[c, out_grid[0], out_grid[1], out_grid[2]]);
    for ch in 0..c {
        let src = input.outer(ch);
        let dst = out.outer_mut(ch);
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    let o = idx3(out_grid, z / factors[0], y / factors[1], x / factors[2]);
                    dst[o] += src[idx3(grid, z, y, x)];
                }
            }
        }
        dst.iter_mut().for_each(|v| *v /= block);
    }
    out
}

fn fc_maps(
    series: &[f64],
    nt: usize,
    voxels: &[usize],
    n_grid: usize,
    timecourses: &Array2<f64>,
) -> Vec<f64> {
    let k = timecourses.nrows();
    // Pre-centre the time courses once; per-voxel work is then K dot products.
    let tcs: Vec<(Vec<f64>, f64)> = timecourses
        .rows()
        .into_iter()
        .map(|row| {
            let m = row.sum() / nt as f64;
            let c: Vec<f64> = row.iter().map(|v| v - m).collect();
            let ss = c.iter().map(|v| v * v).sum();
            (c, ss)
        })
        .collect();
    let mut out = vec![0.0; k * n_grid];
    for (row, &v) in voxels.iter().enumerate() {
        let s = &series[row * nt..(row + 1) * nt];
        let m = s.iter().sum::<f64>() / nt as f64;
        let c: Vec<f64> = s.iter().map(|x| x - m).collect();
        let ss: f64 = c.iter().map(|x| x * x).sum();
        for (ch, (tc, tss)) in tcs.iter().enumerate() {
            let r = if ss <= 0.0 || *tss <= 0.0 {
                0.0
            } else {
                let sxy: f64 = c.iter().zip(tc).map(|(a, b)| a * b).sum();
                (sxy / (ss * tss).sqrt()).clamp(-1.0, 1.0)
            };
            out[ch * n_grid + v] = clamped_atanh(r);
        }
    }
    out
}

/// Fisher-z FC between every ICN time course and every in-mask voxel, then
/// block-mean downsampling (or the reverse, per `order`).
pub fn fc_image(
    volume: &Volume4D,
    icns: &IcnSet,
    downsample: [usize; 3],
    order: FcOrder,
) -> Result<FcImage, FcError> {
    let grid = volume.grid();
    if icns.mask.grid() != grid {
        return Err(FcError::Dimension(format!(
            "volume grid {:?} vs mask grid {:?}",
            grid,
            icns.mask.grid()
        )));
    }
    if icns.timecourses.ncols() != volume.n_timepoints() {
        return Err(FcError::Dimension(format!(
            "time courses have {} points, volume has {}",
            icns.timecourses.ncols(),
            volume.n_timepoints()
        )));
    }
    if downsample.contains(&0) {
        return Err(FcError::Dimension("downsample factors must be >= 1".into()));
    }
    let nt = volume.n_timepoints();
    if nt < 3 {
        return Err(FcError::TooShort(nt));
    }
    if !volume.is_finite() || icns.timecourses.iter().any(|v| !v.is_finite()) {
        return Err(FcError::NonFinite);
    }
    let k = icns.k();
    let maps = match order {
        FcOrder::FcThenDownsample => {
            let n: usize = grid.iter().product();
            let series = volume.masked_series(&icns.mask);
            let full = fc_maps(&series, nt, icns.mask.indices(), n, &icns.timecourses);
            let t = Tensor::from_vec(&[k, grid[0], grid[1], grid[2]], full).expect("sized");
            block_mean(&t, downsample)
        }
        FcOrder::DownsampleThenFc => {
            let vol = Tensor::from_vec(
                volume.tensor().shape(),
                volume.tensor().data().iter().map(|&v| v as f64).collect(),
            )
            .expect("sized");
            let small = block_mean(&vol, downsample);
            let g2 = [small.shape()[1], small.shape()[2], small.shape()[3]];
            let n2: usize = g2.iter().product();
            let mut inside = vec![false; n2];
            for &v in icns.mask.indices() {
                let z = v / (grid[1] * grid[2]);
                let y = (v / grid[2]) % grid[1];
                let x = v % grid[2];
                inside[idx3(g2, z / downsample[0], y / downsample[1], x / downsample[2])] = true;
            }
            let mask2 = Mask::from_bools(g2, inside).expect("sized");
            let mut series = vec![0.0; mask2.count() * nt];
            for (row, &v) in mask2.indices().iter().enumerate() {
                for t in 0..nt {
                    series[row * nt + t] = small.data()[t * n2 + v];
                }
            }
            let full = fc_maps(&series, nt, mask2.indices(), n2, &icns.timecourses);
            Tensor::from_vec(&[k, g2[0], g2[1], g2[2]], full).expect("sized")
        }
    };
    Ok(FcImage {
        data: maps.cast(),
        channel_order: (0..k).collect(),
    })
}

/// Fisher-z correlations of all ICN pairs `i < j`, lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct InterIcnVector {
    pub values: Vec<f64>,
}

pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

pub fn inter_icn_fc(icns: &IcnSet) -> Result<InterIcnVector, FcError> {
    let k = icns.k();
    if k < 2 {
        return Err(FcError::TooFewComponents(k));
    }
    let rows: Vec<Vec<f64>> = icns
        .timecourses
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let mut values = Vec::with_capacity(pair_count(k));
    for i in 0..k {
        for j in i + 1..k {
            values.push(fisher_z(pearson(&rows[i], &rows[j])?)?);
        }
    }
    Ok(InterIcnVector { values })
}

impl InterIcnVector {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[self.values.len()],
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("sized")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, FcError> {
        if t.ndim() != 1 {
            return Err(FcError::Dimension(format!(
                "inter-ICN vector must be 1-d, got {:?}",
                t.shape()
            )));
        }
        Ok(Self {
            values: t.data().iter().map(|&v| v as f64).collect(),
        })
    }
}
