//! Exact t-SNE (no tree approximation).

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::eigen::symmetric_eigen;
use super::AnalysisError;
use crate::rng;

/// Added to every off-diagonal squared distance so duplicates stay apart.
pub const DIST_JITTER: f64 = 1e-12;
pub const MAX_INPUT_DIMS: usize = 50;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `N × 2` coordinates.
    pub coords: Array2<f64>,
    /// `(iteration, KL(P || Q))` at iteration 1, 300 (if reached) and the end.
    pub kl_trace: Vec<(usize, f64)>,
}

/// Centers the rows and projects onto the leading principal axes when the
/// dimension exceeds `max_dims` (via the Gram matrix, cheap for N ≪ d).
pub fn pca_reduce(x: &Array2<f64>, max_dims: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let xc = x - &mean;
    if d <= max_dims {
        return xc;
    }
    let gram = xc.dot(&xc.t());
    let (vals, vecs) = symmetric_eigen(&gram);
    let k = max_dims.min(n);
    Array2::from_shape_fn((n, k), |(i, j)| vecs[[i, j]] * vals[j].max(0.0).sqrt())
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + DIST_JITTER;
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Row-conditional affinities with per-point precision found by bisection
/// so that each row's entropy equals `ln(perplexity)`.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        // Distances are shifted by the row minimum for numerical range.
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d[[i, j]] - dmin) * beta).exp()
                };
                sum += row[j];
                dot += row[j] * (d[[i, j]] - dmin);
            }
            let h = sum.ln() + beta * dot / sum;
            let diff = h - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = if lo.is_finite() {
                    (beta + lo) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    p
}

fn kl_divergence(p: &Array2<f64>, q_num: &Array2<f64>, q_sum: f64) -> f64 {
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            let q = (q_num[[i, j]] / q_sum).max(1e-300);
            kl += pij * (pij / q).ln();
        }
    }
    kl
}

/// Student-t kernel numerators `1 / (1 + |yi - yj|²)` and their sum.
fn low_dim_kernel(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut q = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[[i, 0]] - y[[j, 0]];
            let dy = y[[i, 1]] - y[[j, 1]];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            q[[i, j]] = v;
            q[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    (q, sum)
}

pub fn tsne_embed(features: &Array2<f64>, cfg: &TsneConfig) -> Result<TsneResult, AnalysisError> {
    let n = features.nrows();
    if !(cfg.perplexity > 0.0) || (n as f64) < 3.0 * cfg.perplexity {
        return Err(AnalysisError::Dimension(format!(
            "t-SNE needs at least 3 x perplexity points ({} < {})",
            n,
            3.0 * cfg.perplexity
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let x = pca_reduce(features, MAX_INPUT_DIMS);
    let d = squared_distances(&x);
    let cond = conditional_affinities(&d, cfg.perplexity);
    let mut p = &cond + &cond.t();
    let total = p.sum();
    p.mapv_inplace(|v| (v / total).max(1e-12));
    for i in 0..n {
        p[[i, i]] = 0.0;
    }

    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut r = rng::stream(cfg.seed, rng::tag("tsne"));
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut r));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_trace = Vec::new();

    for it in 0..cfg.iters {
        let exaggerate = it < EXAGGERATION_ITERS;
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let (q, qsum) = low_dim_kernel(&y);
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = if exaggerate {
                    EXAGGERATION * p[[i, j]]
                } else {
                    p[[i, j]]
                };
                let m = (pij - q[[i, j]] / qsum) * q[[i, j]];
                gx += m * (y[[i, 0]] - y[[j, 0]]);
                gy += m * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * gx;
            grad[[i, 1]] = 4.0 * gy;
        }
        for ((g, v), gain) in grad.iter().zip(velocity.iter()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*v > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
        }
        for ((v, g), gain) in velocity.iter_mut().zip(grad.iter()).zip(gains.iter()) {
            *v = momentum * *v - LEARNING_RATE * gain * g;
        }
        y += &velocity;
        let mean: Array1<f64> = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;

        let step = it + 1;
        if step == 1 || step == 300 || step == cfg.iters {
            let (q, qsum) = low_dim_kernel(&y);
            kl_trace.push((step, kl_divergence(&p, &q, qsum)));
        }
    }
    Ok(TsneResult {
        coords: y,
        kl_trace,
    })
}

/// Mean silhouette score of a labelled 2-D (or any-D) point set.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dist = |i: usize, j: usize| {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}
