//! Lasso regression baselines with univariate correlation screening.
//!
//! Feature matrices are `subjects × features` with rows indexed by
//! position. Every fit takes the row subset it may look at, so screening,
//! standardization and λ selection never see held-out subjects.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::analysis::assign_folds;
use crate::fc::{pearson_unchecked, FcImage};

pub const SCREEN_ALPHA: f64 = 0.05;
pub const GRID_POINTS: usize = 30;
/// Smallest grid value as a fraction of λ_max.
pub const GRID_RATIO: f64 = 1e-3;
pub const INNER_FOLDS: usize = 5;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_PASSES: usize = 100_000;

/// Stopping rule for coordinate descent: a full sweep that moves no
/// standardized coefficient by `tol` or more, within `max_passes` sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stopping {
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for Stopping {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_passes: DEFAULT_MAX_PASSES,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LassoError {
    #[error("need at least {need} subjects, have {have}")]
    TooFewSubjects { need: usize, have: usize },
    #[error("target has zero variance")]
    ZeroVarianceTarget,
    #[error("non-finite input")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("negative or non-finite lambda {0}")]
    Lambda(f64),
    #[error("coordinate descent did not converge in {passes} passes")]
    MaxPasses {
        passes: usize,
        last: Box<LassoModel>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Two-sided p-value of a Pearson correlation from `n` pairs, using the
/// t-distribution with `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    // P(|T| > t) = I_{df / (df + t²)}(df / 2, 1 / 2)
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

fn column(x: ArrayView2<'_, f64>, rows: &[usize], j: usize) -> Vec<f64> {
    rows.iter().map(|&i| x[[i, j]]).collect()
}

/// Features (column ids) whose correlation with `y` over `rows` has
/// two-sided p ≤ `alpha`. Constant columns have r = 0 and never pass.
pub fn screen_features(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    alpha: f64,
) -> Result<Vec<usize>, LassoError> {
    if y.len() != x.nrows() {
        return Err(LassoError::Length(y.len(), x.nrows()));
    }
    if rows.len() < 4 {
        return Err(LassoError::TooFewSubjects {
            need: 4,
            have: rows.len(),
        });
    }
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(LassoError::NonFinite);
    }
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    if ys.iter().all(|&v| v == ys[0]) || ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() == 0.0 {
        return Err(LassoError::ZeroVarianceTarget);
    }
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = column(x, rows, j);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite);
        }
        let r = pearson_unchecked(&col, &ys);
        if r != 0.0 && correlation_p_value(r, rows.len()) <= alpha {
            keep.push(j);
        }
    }
    Ok(keep)
}

/// Sparse linear model in original feature units:
/// `intercept + Σ_k weights[k] * x[feature_index[k]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub feature_index: Vec<usize>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl LassoModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .feature_index
                .iter()
                .zip(&self.weights)
                .map(|(&j, &w)| w * row[j])
                .sum::<f64>()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&i| {
                self.intercept
                    + self
                        .feature_index
                        .iter()
                        .zip(&self.weights)
                        .map(|(&j, &w)| w * x[[i, j]])
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn nonzero(&self) -> Vec<usize> {
        self.feature_index
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(&j, _)| j)
            .collect()
    }

    /// Coefficients in standardized units (`w * std`).
    pub fn standardized_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.stds)
            .map(|(w, s)| w * s)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), LassoError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LassoError::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| LassoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LassoError> {
        let text = std::fs::read_to_string(path).map_err(|e| LassoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| LassoError::Json {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Standardized design restricted to given rows and columns; columns with
/// zero variance are dropped.
struct Design {
    /// Column-major `p × n`: column k occupies `zt[k*n..(k+1)*n]`.
    zt: Vec<f64>,
    n: usize,
    cols: Vec<usize>,
    means: Vec<f64>,
    stds: Vec<f64>,
    y_mean: f64,
    yc: Vec<f64>,
}

impl Design {
    fn new(
        x: ArrayView2<'_, f64>,
        y: &[f64],
        rows: &[usize],
        cols: &[usize],
    ) -> Result<Self, LassoError> {
        let n = rows.len();
        if n < 2 {
            return Err(LassoError::TooFewSubjects { need: 2, have: n });
        }
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite);
        }
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let yc = ys.iter().map(|v| v - y_mean).collect();
        let mut d = Self {
            zt: Vec::with_capacity(cols.len() * n),
            n,
            cols: Vec::new(),
            means: Vec::new(),
            stds: Vec::new(),
            y_mean,
            yc,
        };
        for &j in cols {
            let c = column(x, rows, j);
            if c.iter().any(|v| !v.is_finite()) {
                return Err(LassoError::NonFinite);
            }
            let m = c.iter().sum::<f64>() / n as f64;
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if !(s > 0.0) {
                continue;
            }
            d.zt.extend(c.iter().map(|v| (v - m) / s));
            d.cols.push(j);
            d.means.push(m);
            d.stds.push(s);
        }
        Ok(d)
    }

    fn p(&self) -> usize {
        self.cols.len()
    }

    fn col(&self, k: usize) -> &[f64] {
        &self.zt[k * self.n..(k + 1) * self.n]
    }

    /// `max_j |z_jᵀ y| / n`: the smallest λ with an all-zero solution.
    fn lambda_max(&self) -> f64 {
        (0..self.p())
            .map(|k| dot(self.col(k), &self.yc).abs() / self.n as f64)
            .fold(0.0, f64::max)
    }

    fn objective(&self, w: &[f64], r: &[f64], lambda: f64) -> f64 {
        r.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.n as f64)
            + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn to_model(&self, w: &[f64], lambda: f64) -> LassoModel {
        let weights: Vec<f64> = w.iter().zip(&self.stds).map(|(w, s)| w / s).collect();
        let intercept = self.y_mean
            - weights
                .iter()
                .zip(&self.means)
                .map(|(w, m)| w * m)
                .sum::<f64>();
        LassoModel {
            feature_index: self.cols.clone(),
            weights,
            intercept,
            lambda,
            means: self.means.clone(),
            stds: self.stds.clone(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Coordinate-descent state, reusable along a decreasing λ path.
struct Solver<'a> {
    d: &'a Design,
    w: Vec<f64>,
    r: Vec<f64>,
    passes: usize,
    trace: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(d: &'a Design) -> Self {
        Self {
            d,
            w: vec![0.0; d.p()],
            r: d.yc.clone(),
            passes: 0,
            trace: Vec::new(),
        }
    }

    /// Exact minimization over coordinate k; returns |Δw_k|.
    fn update(&mut self, k: usize, lambda: f64) -> f64 {
        let n = self.d.n as f64;
        let z = self.d.col(k);
        let old = self.w[k];
        let rho = dot(z, &self.r) / n + old;
        let new = soft_threshold(rho, lambda);
        if new != old {
            let delta = new - old;
            self.r.iter_mut().zip(z).for_each(|(r, z)| *r -= delta * z);
            self.w[k] = new;
        }
        (new - old).abs()
    }

    /// Alternates full sweeps with sweeps over the current support until a
    /// full sweep moves no coefficient by `tol` or more.
    fn solve(&mut self, lambda: f64, tol: f64, max_passes: usize) -> bool {
        loop {
            if self.passes >= max_passes {
                return false;
            }
            let mut max_change = 0.0f64;
            for k in 0..self.d.p() {
                max_change = max_change.max(self.update(k, lambda));
            }
            self.passes += 1;
            self.trace.push(self.d.objective(&self.w, &self.r, lambda));
            if max_change < tol {
                return true;
            }
            loop {
                if self.passes >= max_passes {
                    return false;
                }
                let active: Vec<usize> = (0..self.d.p()).filter(|&k| self.w[k] != 0.0).collect();
                let mut change = 0.0f64;
                for &k in &active {
                    change = change.max(self.update(k, lambda));
                }
                self.passes += 1;
                self.trace.push(self.d.objective(&self.w, &self.r, lambda));
                if change < tol {
                    break;
                }
            }
        }
    }
}

/// Outcome of a single-λ fit.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub model: LassoModel,
    pub passes: usize,
    /// Objective after every pass, non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Minimizes `(1/2n)‖y_c − Z w‖² + λ‖w‖₁` over the standardized columns
/// `cols` of the rows `rows`.
pub fn fit_lasso(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    cols: &[usize],
    lambda: f64,
    tol: f64,
    max_passes: usize,
) -> Result<LassoFit, LassoError> {
    if y.len() != x.nrows() {
        return Err(LassoError::Length(y.len(), x.nrows()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LassoError::Lambda(lambda));
    }
    let d = Design::new(x, y, rows, cols)?;
    let mut s = Solver::new(&d);
    let ok = s.solve(lambda, tol, max_passes);
    let model = d.to_model(&s.w, lambda);
    if !ok {
        return Err(LassoError::MaxPasses {
            passes: s.passes,
            last: Box::new(model),
        });
    }
    Ok(LassoFit {
        model,
        passes: s.passes,
        objective_trace: s.trace,
    })
}

/// λ_max for the standardized columns `cols` over `rows`.
pub fn lambda_max(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    cols: &[usize],
) -> Result<f64, LassoError> {
    Ok(Design::new(x, y, rows, cols)?.lambda_max())
}

/// `points` log-spaced values from `lmax` down to `ratio * lmax`.
pub fn lambda_grid(lmax: f64, points: usize, ratio: f64) -> Vec<f64> {
    if points == 1 {
        return vec![lmax];
    }
    (0..points)
        .map(|i| lmax * ratio.powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Fits the whole (decreasing) grid with warm starts and returns one model
/// per λ.
fn fit_path(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    cols: &[usize],
    grid: &[f64],
    stop: Stopping,
) -> Result<Vec<LassoModel>, LassoError> {
    let d = Design::new(x, y, rows, cols)?;
    let mut s = Solver::new(&d);
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if !s.solve(lambda, stop.tol, stop.max_passes) {
            return Err(LassoError::MaxPasses {
                passes: s.passes,
                last: Box::new(d.to_model(&s.w, lambda)),
            });
        }
        out.push(d.to_model(&s.w, lambda));
    }
    Ok(out)
}

/// Screening + lasso on the rows `rows`; the returned model indexes the
/// full feature space.
pub fn fit_screened(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    alpha: f64,
    lambda: f64,
    stop: Stopping,
) -> Result<LassoModel, LassoError> {
    let cols = screen_features(x, y, rows, alpha)?;
    Ok(fit_lasso(x, y, rows, &cols, lambda, stop.tol, stop.max_passes)?.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean inner-validation MAE per grid point.
    pub cv_mae: Vec<f64>,
}

/// Inner k-fold CV over the outer-training rows. Screening is redone on each
/// inner training split; the grid spans λ_max of the screened outer-training
/// design down to `GRID_RATIO * λ_max`.
pub fn select_lambda_nested(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    outer_train: &[usize],
    k_inner: usize,
    alpha: f64,
    stop: Stopping,
    seed: u64,
) -> Result<LambdaSelection, LassoError> {
    if outer_train.len() < 10 {
        return Err(LassoError::TooFewSubjects {
            need: 10,
            have: outer_train.len(),
        });
    }
    let cols = screen_features(x, y, outer_train, alpha)?;
    let lmax = Design::new(x, y, outer_train, &cols)?.lambda_max();
    let lmax = if lmax > 0.0 { lmax } else { 1.0 };
    let grid = lambda_grid(lmax, GRID_POINTS, GRID_RATIO);

    let ages: Vec<f64> = outer_train.iter().map(|&i| y[i]).collect();
    let folds = assign_folds(&ages, k_inner, seed).map_err(|_| LassoError::TooFewSubjects {
        need: k_inner,
        have: ages.len(),
    })?;
    let mut err = vec![0.0; grid.len()];
    for f in 0..k_inner {
        let tr: Vec<usize> = folds
            .train_indices(f)
            .iter()
            .map(|&i| outer_train[i])
            .collect();
        let va: Vec<usize> = folds
            .test_indices(f)
            .iter()
            .map(|&i| outer_train[i])
            .collect();
        let inner_cols = screen_features(x, y, &tr, alpha)?;
        let path = fit_path(x, y, &tr, &inner_cols, &grid, stop)?;
        for (g, m) in path.iter().enumerate() {
            let pred = m.predict(x, &va);
            let mae = pred
                .iter()
                .zip(&va)
                .map(|(p, &i)| (p - y[i]).abs())
                .sum::<f64>()
                / va.len() as f64;
            err[g] += mae / k_inner as f64;
        }
    }
    // Grid is decreasing, so the first minimum is the largest λ among ties.
    let best = (0..grid.len()).fold(0, |b, g| if err[g] < err[b] { g } else { b });
    Ok(LambdaSelection {
        lambda: grid[best],
        grid,
        cv_mae: err,
    })
}

/// Channel-major flattening of an FC image (`K·Z·Y·X` values).
pub fn flatten_fc(fc: &FcImage) -> Vec<f64> {
    fc.data.data().iter().map(|&v| v as f64).collect()
}

/// Stacks per-subject feature vectors into a `subjects × features` matrix.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, LassoError> {
    let p = rows.first().map_or(0, |r| r.len());
    if let Some(bad) = rows.iter().find(|r| r.len() != p) {
        return Err(LassoError::Length(bad.len(), p));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), p), flat).expect("sized"))
}
