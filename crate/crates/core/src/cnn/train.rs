use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AgeCnn, NetError};
use crate::ops::{euclidean_loss, Mode};
use crate::rng;
use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_drop_factor: f64,
    pub lr_step: u64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Start the output bias at the mean training age instead of 0.
    pub init_output_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            momentum: 0.9,
            lr_drop_factor: 0.1,
            lr_step: 10_000,
            max_iters: 30_000,
            batch_size: 16,
            seed: 0,
            init_output_bias_to_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |field: &str, reason: &str| {
            Err(TrainError::Config {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor", "must lie in (0, 1]");
        }
        if self.lr_step == 0 {
            return bad("lr_step", "must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("train config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("sample {id}: image shape {found:?}, network expects {expected:?}")]
    Shape {
        id: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sample {0}: image contains non-finite values")]
    NonFiniteInput(String),
    #[error("non-finite loss at iteration {iter} (batch: {})", batch.join(", "))]
    NonFinite { iter: u64, batch: Vec<String> },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// `base_lr * lr_drop_factor^floor(iter / lr_step)`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_drop_factor.powi((iter / cfg.lr_step) as i32)
}

/// Classic momentum: `v = momentum * v - lr * g; w = w + v`.
pub fn sgd_step<T: Real>(
    weights: &mut Tensor<T>,
    grads: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<(), ShapeError> {
    grads.expect_shape(weights.shape())?;
    velocity.expect_shape(weights.shape())?;
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((w, &g), v) in weights
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v - lr * g;
        *w += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub id: &'a str,
    /// `(K, Z, Y, X)` image.
    pub image: &'a Tensor<f32>,
    pub age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Stacks `(K, Z, Y, X)` images into one `(N, K, Z, Y, X)` batch.
pub fn stack(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(&shape, data).expect("images share a shape")
}

/// Endless sequence of batches: each epoch is a fresh seeded shuffle and a
/// batch never spans two epochs.
struct Batches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            n,
            size: size.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut r = rng::stream(self.seed, rng::tag("epoch") ^ self.epoch);
        self.order.shuffle(&mut r);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        b
    }
}

/// Minibatch SGD for `cfg.max_iters` steps. Returns the per-step loss trace.
pub fn train(
    model: &mut AgeCnn<f32>,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>, TrainError> {
    cfg.check()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let expected = model.input_shape(1)[1..].to_vec();
    for s in data {
        if s.image.shape() != expected.as_slice() {
            return Err(TrainError::Shape {
                id: s.id.to_string(),
                expected,
                found: s.image.shape().to_vec(),
            });
        }
        if !s.image.is_finite() || !s.age.is_finite() {
            return Err(TrainError::NonFiniteInput(s.id.to_string()));
        }
    }
    if cfg.init_output_bias_to_mean {
        let mean = data.iter().map(|s| s.age).sum::<f64>() / data.len() as f64;
        model.set_output_bias(mean);
    }
    let mut velocity: Vec<(Tensor<f32>, Option<Tensor<f32>>)> = model
        .layers()
        .iter()
        .map(|(_, p)| {
            (
                Tensor::zeros(p.weights.shape()),
                p.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            )
        })
        .collect();

    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.max_iters as usize);
    for iter in 0..cfg.max_iters {
        let idx = batches.next_batch().to_vec();
        let x = stack(&idx.iter().map(|&i| data[i].image).collect::<Vec<_>>());
        let target: Vec<f64> = idx.iter().map(|&i| data[i].age).collect();
        let fwd = model.forward(
            &x,
            Mode::Train,
            rng::stream_seed(cfg.seed, rng::tag("dropout") ^ iter),
        )?;
        let (loss, grad) = euclidean_loss(&fwd.output, &target).map_err(NetError::from)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iter,
                batch: idx.iter().map(|&i| data[i].id.to_string()).collect(),
            });
        }
        model.zero_grad();
        model.backward(&fwd, &grad)?;
        model.commit_bn(&fwd.bn_stats)?;
        let lr = lr_at(iter, cfg);
        for (p, (vw, vb)) in model.layers_mut().into_iter().zip(velocity.iter_mut()) {
            sgd_step(&mut p.weights, &p.grad_weights, vw, lr, cfg.momentum)
                .map_err(NetError::from)?;
            if let (Some(b), Some(gb), Some(vb)) = (p.bias.as_mut(), p.grad_bias.as_ref(), vb) {
                sgd_step(b, gb, vb, lr, cfg.momentum).map_err(NetError::from)?;
            }
        }
        trace.push(TraceRow { iter, lr, loss });
    }
    Ok(trace)
}

/// Writes `iter,lr,loss` rows.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()
}
