//! Sparse non-negative ICN decomposition.
//!
//! Two stages. The group stage minimizes
//!
//! ```text
//! sum_s ||X_s - W_s H||_F^2 + sparsity * ||H||_1      (W_s, H >= 0)
//! ```
//!
//! over shared spatial maps `H` (K x V) and per-subject loadings `W_s`
//! (T x K) with multiplicative updates. The subject stage warm-starts `H`
//! from the group maps and refines it on one subject, so component `k` means
//! the same network for every subject.
//!
//! `X_s` is the masked time-major data with negative entries truncated to
//! zero; time courses are always taken from the untruncated signal.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{Mask, Volume4D};
use crate::volume_io::{self, IoError};

/// Guards multiplicative-update denominators against exact zeros.
const TINY: f64 = 1e-300;
/// W-only updates run before alternating in the subject stage.
const SUBJECT_WARMUP: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DecompError {
    #[error("no volumes given")]
    Empty,
    #[error("component count {k} out of range (must be 1..{max})")]
    ComponentCount { k: usize, max: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("spatial row {component} sums to zero")]
    ZeroWeightRow { component: usize },
    #[error("component {component} degenerated again after re-seeding")]
    Degenerate { component: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmfParams {
    pub k: usize,
    pub sparsity: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for NmfParams {
    fn default() -> Self {
        Self {
            k: 56,
            sparsity: 0.1,
            iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfFit {
    /// Raw (not normalized) spatial factors, K x V.
    pub h: Array2<f64>,
    /// Per-subject temporal loadings, T_s x K.
    pub w: Vec<Array2<f64>>,
    /// Objective at initialization and after every iteration.
    pub objective: Vec<f64>,
    /// Components that were re-seeded from the residual.
    pub reseeded: Vec<usize>,
}

fn uniform_init(r: &mut rng::StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || 0.1 + r.random::<f64>())
}

fn check_inputs(data: &[Array2<f64>], k: usize) -> Result<usize, DecompError> {
    let first = data.first().ok_or(DecompError::Empty)?;
    let v = first.ncols();
    if data.iter().any(|x| x.ncols() != v) {
        return Err(DecompError::Dimension(
            "subjects differ in voxel count".into(),
        ));
    }
    if data.iter().any(|x| x.iter().any(|e| !e.is_finite())) {
        return Err(DecompError::NonFinite);
    }
    let total_t: usize = data.iter().map(|x| x.nrows()).sum();
    let max = v.min(total_t);
    if k == 0 || k >= max {
        return Err(DecompError::ComponentCount { k, max });
    }
    Ok(v)
}

/// `||X - W H||^2` from cached products: `|X|^2 - 2<W, X H^T> + <W^T W, H H^T>`.
fn residual_sq(x_sq: f64, w: &Array2<f64>, xht: &Array2<f64>, hht: &Array2<f64>) -> f64 {
    let cross: f64 = (w * xht).sum();
    let wtw = w.t().dot(w);
    let quad: f64 = (&wtw * hht).sum();
    (x_sq - 2.0 * cross + quad).max(0.0)
}

fn update_w(w: &mut Array2<f64>, xht: &Array2<f64>, hht: &Array2<f64>) {
    let denom = w.dot(hht);
    Zip::from(w)
        .and(xht)
        .and(&denom)
        .for_each(|w, &num, &den| *w *= num / (den + TINY));
}

fn update_h(h: &mut Array2<f64>, wtx: &Array2<f64>, wtw: &Array2<f64>, sparsity: f64) {
    let denom = wtw.dot(&*h);
    Zip::from(h)
        .and(wtx)
        .and(&denom)
        .for_each(|h, &num, &den| *h *= num / (den + 0.5 * sparsity + TINY));
}

/// Re-seeds zero rows of `h` from the positive residual. Returns the rows touched.
fn reseed_dead_rows(
    data: &[Array2<f64>],
    w: &mut [Array2<f64>],
    h: &mut Array2<f64>,
    reseeded: &mut Vec<usize>,
) -> Result<(), DecompError> {
    let dead: Vec<usize> = (0..h.nrows()).filter(|&k| h.row(k).sum() <= 0.0).collect();
    if dead.is_empty() {
        return Ok(());
    }
    if let Some(&k) = dead.iter().find(|k| reseeded.contains(k)) {
        return Err(DecompError::Degenerate { component: k });
    }
    let mut resid = Array2::<f64>::zeros((1, h.ncols()));
    let mut count = 0usize;
    for (x, ws) in data.iter().zip(w.iter()) {
        let r = x - &ws.dot(&*h);
        resid += &r
            .mapv(|e| e.max(0.0))
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        count += x.nrows();
    }
    resid /= count.max(1) as f64;
    for &k in &dead {
        h.row_mut(k).assign(&resid.row(0));
        if h.row(k).sum() <= 0.0 {
            return Err(DecompError::Degenerate { component: k });
        }
        for ws in w.iter_mut() {
            ws.column_mut(k).fill(1.0);
        }
        reseeded.push(k);
    }
    Ok(())
}

/// Group stage on raw non-negative matrices (one `T_s x V` matrix per subject).
pub fn nmf_group(data: &[Array2<f64>], params: &NmfParams) -> Result<NmfFit, DecompError> {
    let v = check_inputs(data, params.k)?;
    if data.iter().any(|x| x.iter().any(|&e| e < 0.0)) {
        return Err(DecompError::Dimension(
            "negative entries in NMF input".into(),
        ));
    }
    let k = params.k;
    let mut r = rng::stream(params.seed, rng::tag("nmf-h"));
    let mut h = uniform_init(&mut r, k, v);
    let mut w: Vec<Array2<f64>> = data
        .iter()
        .enumerate()
        .map(|(s, x)| {
            let mut rs = rng::stream(params.seed, s as u64);
            uniform_init(&mut rs, x.nrows(), k)
        })
        .collect();
    let x_sq: Vec<f64> = data.iter().map(|x| x.iter().map(|e| e * e).sum()).collect();

    let mut objective = Vec::with_capacity(params.iters + 1);
    let mut reseeded = Vec::new();
    for it in 0..=params.iters {
        let hht = h.dot(&h.t());
        // Per-subject work in parallel, reductions in subject order.
        let per: Vec<(f64, Array2<f64>, Array2<f64>)> = data
            .par_iter()
            .zip(w.par_iter_mut())
            .zip(x_sq.par_iter())
            .map(|((x, ws), &xs)| {
                let xht = x.dot(&h.t());
                let fit = residual_sq(xs, ws, &xht, &hht);
                if it < params.iters {
                    update_w(ws, &xht, &hht);
                }
                (fit, ws.t().dot(x), ws.t().dot(&*ws))
            })
            .collect();
        let fit: f64 = per.iter().map(|p| p.0).sum();
        objective.push(fit + params.sparsity * h.sum());
        if it == params.iters {
            break;
        }
        let mut wtx = Array2::<f64>::zeros((k, v));
        let mut wtw = Array2::<f64>::zeros((k, k));
        for (_, a, b) in &per {
            wtx += a;
            wtw += b;
        }
        update_h(&mut h, &wtx, &wtw, params.sparsity);
        reseed_dead_rows(data, &mut w, &mut h, &mut reseeded)?;
    }
    Ok(NmfFit {
        h,
        w,
        objective,
        reseeded,
    })
}

/// Rows scaled to unit maximum.
pub fn max_normalize(h: &Array2<f64>) -> Array2<f64> {
    let mut out = h.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row /= max;
        }
    }
    out
}

fn nmf_input(volume: &Volume4D, mask: &Mask) -> Array2<f64> {
    let nt = volume.n_timepoints();
    let data = volume.masked_time_major(mask);
    Array2::from_shape_vec((nt, mask.count()), data)
        .expect("sized")
        .mapv(|e| e.max(0.0))
}

#[derive(Debug, Clone)]
pub struct GroupIcns {
    /// Max-normalized shared maps, K x V over the mask.
    pub maps: Array2<f64>,
    pub mask: Mask,
    pub objective: Vec<f64>,
    pub params: NmfParams,
}

pub fn fit_group_icns(
    volumes: &[&Volume4D],
    mask: &Mask,
    params: &NmfParams,
) -> Result<GroupIcns, DecompError> {
    if volumes.is_empty() {
        return Err(DecompError::Empty);
    }
    for vol in volumes {
        if vol.grid() != mask.grid() {
            return Err(DecompError::Dimension(format!(
                "volume grid {:?} vs mask grid {:?}",
                vol.grid(),
                mask.grid()
            )));
        }
        if !vol.is_finite() {
            return Err(DecompError::NonFinite);
        }
    }
    let data: Vec<Array2<f64>> = volumes.iter().map(|v| nmf_input(v, mask)).collect();
    let fit = nmf_group(&data, params)?;
    Ok(GroupIcns {
        maps: max_normalize(&fit.h),
        mask: mask.clone(),
        objective: fit.objective,
        params: *params,
    })
}

/// Subject-specific maps and time courses, component order shared with the group.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnSet {
    /// K x V over `mask`, non-negative, each row with unit maximum.
    pub spatial: Array2<f64>,
    /// K x T, zero-mean rows.
    pub timecourses: Array2<f64>,
    pub mask: Mask,
}

impl IcnSet {
    pub fn k(&self) -> usize {
        self.spatial.nrows()
    }

    /// Spatial maps on the full grid, shaped `(K, Z, Y, X)`.
    pub fn spatial_tensor(&self) -> Tensor<f32> {
        let g = self.mask.grid();
        let nv: usize = g.iter().product();
        let mut out = Tensor::zeros(&[self.k(), g[0], g[1], g[2]]);
        for k in 0..self.k() {
            let row = out.outer_mut(k);
            for (j, &v) in self.mask.indices().iter().enumerate() {
                row[v] = self.spatial[[k, j]] as f32;
            }
            debug_assert_eq!(row.len(), nv);
        }
        out
    }
}

/// Refines `group_maps` (K x V over `mask`) on one subject.
pub fn fit_subject_icns(
    volume: &Volume4D,
    mask: &Mask,
    group_maps: &Array2<f64>,
    sparsity: f64,
    iters: usize,
) -> Result<(IcnSet, f64), DecompError> {
    if volume.grid() != mask.grid() || group_maps.ncols() != mask.count() {
        return Err(DecompError::Dimension(format!(
            "volume grid {:?}, mask grid {:?} with {} voxels, maps {}x{}",
            volume.grid(),
            mask.grid(),
            mask.count(),
            group_maps.nrows(),
            group_maps.ncols()
        )));
    }
    if !volume.is_finite() || group_maps.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(DecompError::NonFinite);
    }
    let x = nmf_input(volume, mask);
    let x_sq: f64 = x.iter().map(|e| e * e).sum();
    let k = group_maps.nrows();
    let mut h = group_maps.clone();
    let mut w = vec![Array2::<f64>::ones((x.nrows(), k))];
    let mut reseeded = Vec::new();
    let mut objective = f64::NAN;
    if iters > 0 {
        let hht = h.dot(&h.t());
        let xht = x.dot(&h.t());
        for _ in 0..SUBJECT_WARMUP {
            update_w(&mut w[0], &xht, &hht);
        }
        for _ in 0..iters {
            let hht = h.dot(&h.t());
            let xht = x.dot(&h.t());
            update_w(&mut w[0], &xht, &hht);
            let wtx = w[0].t().dot(&x);
            let wtw = w[0].t().dot(&w[0]);
            update_h(&mut h, &wtx, &wtw, sparsity);
            reseed_dead_rows(std::slice::from_ref(&x), &mut w, &mut h, &mut reseeded)?;
        }
        let hht = h.dot(&h.t());
        let xht = x.dot(&h.t());
        objective = residual_sq(x_sq, &w[0], &xht, &hht) + sparsity * h.sum();
    }
    let spatial = max_normalize(&h);
    for (c, row) in spatial.rows().into_iter().enumerate() {
        if row.sum() <= 0.0 {
            return Err(DecompError::Degenerate { component: c });
        }
    }
    let timecourses = extract_timecourses(volume, mask, &spatial)?;
    Ok((
        IcnSet {
            spatial,
            timecourses,
            mask: mask.clone(),
        },
        objective,
    ))
}

/// Weighted voxel averages (weights = spatial row normalized to sum 1), zero-meaned.
pub fn extract_timecourses(
    volume: &Volume4D,
    mask: &Mask,
    spatial: &Array2<f64>,
) -> Result<Array2<f64>, DecompError> {
    if spatial.ncols() != mask.count() || volume.grid() != mask.grid() {
        return Err(DecompError::Dimension(format!(
            "spatial has {} columns, mask has {} voxels",
            spatial.ncols(),
            mask.count()
        )));
    }
    let nt = volume.n_timepoints();
    let x =
        Array2::from_shape_vec((nt, mask.count()), volume.masked_time_major(mask)).expect("sized");
    let mut weights = spatial.clone();
    for (c, mut row) in weights.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(DecompError::ZeroWeightRow { component: c });
        }
        row /= s;
    }
    let mut tc = weights.dot(&x.t());
    for mut row in tc.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row -= mean;
    }
    Ok(tc)
}

/// Sidecar describing a persisted ICN fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnSidecar {
    pub k: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub iterations: usize,
    pub final_objective: Option<f64>,
    /// Subjects whose data shaped the group maps.
    pub trained_on: Vec<String>,
}

pub const MASK_FILE: &str = "mask.bvol";
pub const GROUP_FILE: &str = "group_maps.bvol";
pub const GROUP_SIDECAR: &str = "group.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DecompError> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    fs::write(path, text).map_err(|e| {
        DecompError::Io(IoError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DecompError> {
    let text = fs::read_to_string(path).map_err(|e| {
        DecompError::Io(IoError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    serde_json::from_str(&text).map_err(|e| DecompError::Sidecar {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn maps_to_tensor(maps: &Array2<f64>, mask: &Mask) -> Tensor<f32> {
    IcnSet {
        spatial: maps.clone(),
        timecourses: Array2::zeros((maps.nrows(), 1)),
        mask: mask.clone(),
    }
    .spatial_tensor()
}

fn tensor_to_maps(t: &Tensor<f32>, mask: &Mask) -> Result<Array2<f64>, DecompError> {
    let g = mask.grid();
    if t.ndim() != 4 || t.shape()[1..] != g {
        return Err(DecompError::Dimension(format!(
            "maps shape {:?} vs mask grid {:?}",
            t.shape(),
            g
        )));
    }
    let k = t.shape()[0];
    let mut out = Array2::zeros((k, mask.count()));
    for c in 0..k {
        let row = t.outer(c);
        for (j, &v) in mask.indices().iter().enumerate() {
            out[[c, j]] = row[v] as f64;
        }
    }
    Ok(out)
}

pub fn write_group(dir: &Path, group: &GroupIcns, sidecar: &IcnSidecar) -> Result<(), DecompError> {
    volume_io::write_bvol(dir.join(MASK_FILE), &group.mask.to_tensor())?;
    volume_io::write_bvol(
        dir.join(GROUP_FILE),
        &maps_to_tensor(&group.maps, &group.mask),
    )?;
    write_json(&dir.join(GROUP_SIDECAR), sidecar)
}

pub fn read_mask(dir: &Path) -> Result<Mask, DecompError> {
    let t = volume_io::read_bvol(dir.join(MASK_FILE))?;
    Mask::from_tensor(&t).map_err(|e| DecompError::Dimension(e.to_string()))
}

pub fn read_group(dir: &Path) -> Result<(Array2<f64>, Mask, IcnSidecar), DecompError> {
    let mask = read_mask(dir)?;
    let maps = tensor_to_maps(&volume_io::read_bvol(dir.join(GROUP_FILE))?, &mask)?;
    let sidecar = read_json(&dir.join(GROUP_SIDECAR))?;
    Ok((maps, mask, sidecar))
}

pub fn subject_files(dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{id}_spatial.bvol")),
        dir.join(format!("{id}_timecourses.bvol")),
        dir.join(format!("{id}_icn.json")),
    ]
}

/// Writes `<id>_spatial.bvol` (K,Z,Y,X), `<id>_timecourses.bvol` (K,T) and
/// `<id>_icn.json`; the mask lives once per directory.
pub fn write_icnset(
    dir: &Path,
    id: &str,
    icns: &IcnSet,
    sidecar: &IcnSidecar,
) -> Result<(), DecompError> {
    let [sp, tc, js] = subject_files(dir, id);
    volume_io::write_bvol(sp, &icns.spatial_tensor())?;
    let (k, t) = icns.timecourses.dim();
    let tct = Tensor::from_vec(
        &[k, t],
        icns.timecourses.iter().map(|&v| v as f32).collect(),
    )
    .expect("sized");
    volume_io::write_bvol(tc, &tct)?;
    write_json(&js, sidecar)
}

pub fn read_icnset(dir: &Path, id: &str, mask: &Mask) -> Result<(IcnSet, IcnSidecar), DecompError> {
    let [sp, tc, js] = subject_files(dir, id);
    let spatial = tensor_to_maps(&volume_io::read_bvol(sp)?, mask)?;
    let tct = volume_io::read_bvol(tc)?;
    if tct.ndim() != 2 || tct.shape()[0] != spatial.nrows() {
        return Err(DecompError::Dimension(format!(
            "time courses shape {:?}",
            tct.shape()
        )));
    }
    let timecourses = Array2::from_shape_vec(
        (tct.shape()[0], tct.shape()[1]),
        tct.data().iter().map(|&v| v as f64).collect(),
    )
    .expect("sized");
    Ok((
        IcnSet {
            spatial,
            timecourses,
            mask: mask.clone(),
        },
        read_json(&js)?,
    ))
}
