use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{NetworkConfig, N_BLOCKS};
use crate::ops::{
    add_in_place, batchnorm_apply, batchnorm_backward, conv3d_backward, conv3d_forward,
    dropout_backward, dropout_forward, dropout_mask, fully_connected, fully_connected_backward,
    load_checkpoint, maxpool3d, maxpool3d_backward, relu, relu_backward, save_checkpoint,
    update_running_stats, BatchStats, BnCache, CheckpointError, LayerError, LayerParams, Mode,
    PoolCache,
};
use crate::rng;
use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("network config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("grid axis {axis} has extent {extent}; {need} needed for the configured pooling")]
    GridTooSmall {
        axis: usize,
        extent: usize,
        need: usize,
    },
    #[error("input shape {found:?} does not match network input {expected:?}")]
    Input {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the network: {0}")]
    CheckpointMismatch(String),
}

impl From<ShapeError> for NetError {
    fn from(e: ShapeError) -> Self {
        NetError::Layer(e.into())
    }
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut r = rng::stream(seed, rng::tag(name));
    Tensor::from_fn(shape, |_| T::of(normal.sample(&mut r)))
}

/// Bias-free convolution followed by batch norm (the BN shift plays the
/// role of the bias).
#[derive(Debug, Clone, PartialEq)]
struct ConvBn<T> {
    conv: LayerParams<T>,
    bn: LayerParams<T>,
}

struct ConvBnTape<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
}

impl<T: Real> ConvBn<T> {
    fn new(c_in: usize, c_out: usize, k: usize, seed: u64, name: &str) -> Self {
        let w = he_normal(&[c_out, c_in, k, k, k], c_in * k * k * k, seed, name);
        Self {
            conv: LayerParams::new(w, None),
            bn: LayerParams::batchnorm(c_out),
        }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Tensor<T>, ConvBnTape<T>), LayerError> {
        let z = conv3d_forward(x, &self.conv)?;
        let (y, cache, s) = batchnorm_apply(&z, &self.bn, mode)?;
        stats.extend(s);
        Ok((
            y,
            ConvBnTape {
                input: x.clone(),
                bn: cache,
            },
        ))
    }

    fn backward(&mut self, tape: &ConvBnTape<T>, gy: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let gz = batchnorm_backward(gy, &mut self.bn, &tape.bn)?;
        let g = conv3d_backward(&tape.input, &self.conv, &gz)?;
        self.conv.grad_weights.add_assign(&g.weights)?;
        Ok(g.input)
    }
}

/// Post-activation residual block: `relu(bn(conv(relu(bn(conv(x))))) + s(x))`
/// where `s` is the identity or a 1×1×1 conv + BN when widths differ.
#[derive(Debug, Clone, PartialEq)]
struct ResBlock<T> {
    a: ConvBn<T>,
    b: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
}

struct ResTape<T> {
    a: ConvBnTape<T>,
    a_pre: Tensor<T>,
    b: ConvBnTape<T>,
    shortcut: Option<ConvBnTape<T>>,
    sum: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    fn new(c_in: usize, c_out: usize, seed: u64, name: &str) -> Self {
        Self {
            a: ConvBn::new(c_in, c_out, 3, seed, &format!("{name}.a")),
            b: ConvBn::new(c_out, c_out, 3, seed, &format!("{name}.b")),
            shortcut: (c_in != c_out)
                .then(|| ConvBn::new(c_in, c_out, 1, seed, &format!("{name}.shortcut"))),
        }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Tensor<T>, ResTape<T>), LayerError> {
        let (a_pre, ta) = self.a.forward(x, mode, stats)?;
        let (mut sum, tb) = self.b.forward(&relu(&a_pre), mode, stats)?;
        let ts = match &self.shortcut {
            Some(s) => {
                let (y, t) = s.forward(x, mode, stats)?;
                add_in_place(&mut sum, &y)?;
                Some(t)
            }
            None => {
                add_in_place(&mut sum, x)?;
                None
            }
        };
        Ok((
            relu(&sum),
            ResTape {
                a: ta,
                a_pre,
                b: tb,
                shortcut: ts,
                sum,
            },
        ))
    }

    fn backward(&mut self, tape: &ResTape<T>, gy: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let gs = relu_backward(&tape.sum, gy)?;
        let ga = self.b.backward(&tape.b, &gs)?;
        let mut gx = self
            .a
            .backward(&tape.a, &relu_backward(&tape.a_pre, &ga)?)?;
        match (&mut self.shortcut, &tape.shortcut) {
            (Some(s), Some(t)) => add_in_place(&mut gx, &s.backward(t, &gs)?)?,
            _ => add_in_place(&mut gx, &gs)?,
        }
        Ok(gx)
    }
}

struct Tape<T> {
    conv1: ConvBnTape<T>,
    conv1_pre: Tensor<T>,
    pools: Vec<Option<PoolCache>>,
    blocks: Vec<ResTape<T>>,
    trunk_shape: Vec<usize>,
    flat: Tensor<T>,
    fc1_pre: Tensor<T>,
    mask: Option<Tensor<T>>,
    fc2_in: Tensor<T>,
}

/// Result of a forward pass, consumed by [`AgeCnn::backward`].
pub struct Forward<T> {
    /// One prediction per sample.
    pub output: Vec<f64>,
    /// FC1 post-ReLU activations, `(N, fc1_units)`, before dropout.
    pub features: Tensor<T>,
    /// Batch statistics to fold into the BN running averages (train mode).
    pub bn_stats: Vec<BatchStats>,
    tape: Tape<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeCnn<T = f32> {
    cfg: NetworkConfig,
    conv1: ConvBn<T>,
    blocks: Vec<ResBlock<T>>,
    fc1: LayerParams<T>,
    fc2: LayerParams<T>,
}

impl<T: Real> AgeCnn<T> {
    pub fn new(cfg: &NetworkConfig) -> Result<Self, NetError> {
        cfg.check()?;
        let s = cfg.init_seed;
        let conv1 = ConvBn::new(cfg.in_channels, cfg.conv1_filters, 3, s, "conv1");
        let mut c_in = cfg.conv1_filters;
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        for (i, &c_out) in cfg.resblock_filters.iter().enumerate() {
            blocks.push(ResBlock::new(c_in, c_out, s, &format!("res{}", i + 1)));
            c_in = c_out;
        }
        let d = cfg.flat_features();
        let u = cfg.fc1_units;
        let fc1 = LayerParams::new(he_normal(&[u, d], d, s, "fc1"), Some(Tensor::zeros(&[u])));
        let fc2 = LayerParams::new(he_normal(&[1, u], u, s, "fc2"), Some(Tensor::zeros(&[1])));
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            blocks,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Expected shape of a batch of `n` inputs.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let g = self.cfg.input_grid;
        vec![n, self.cfg.in_channels, g[0], g[1], g[2]]
    }

    /// All layers in a fixed order with stable names.
    pub fn layers(&self) -> Vec<(String, &LayerParams<T>)> {
        let mut out = vec![
            ("conv1.conv".to_string(), &self.conv1.conv),
            ("conv1.bn".to_string(), &self.conv1.bn),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = format!("res{}", i + 1);
            out.push((format!("{n}.a.conv"), &b.a.conv));
            out.push((format!("{n}.a.bn"), &b.a.bn));
            out.push((format!("{n}.b.conv"), &b.b.conv));
            out.push((format!("{n}.b.bn"), &b.b.bn));
            if let Some(s) = &b.shortcut {
                out.push((format!("{n}.shortcut.conv"), &s.conv));
                out.push((format!("{n}.shortcut.bn"), &s.bn));
            }
        }
        out.push(("fc1".to_string(), &self.fc1));
        out.push(("fc2".to_string(), &self.fc2));
        out
    }

    /// Same order as [`AgeCnn::layers`].
    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut out = vec![&mut self.conv1.conv, &mut self.conv1.bn];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.a.conv);
            out.push(&mut b.a.bn);
            out.push(&mut b.b.conv);
            out.push(&mut b.b.bn);
            if let Some(s) = b.shortcut.as_mut() {
                out.push(&mut s.conv);
                out.push(&mut s.bn);
            }
        }
        out.push(&mut self.fc1);
        out.push(&mut self.fc2);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, p)| p.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// True once every BN layer has running statistics.
    pub fn is_trained(&self) -> bool {
        self.layers()
            .iter()
            .filter_map(|(_, p)| p.bn.as_ref())
            .all(|s| s.updates > 0)
    }

    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(b) = self.fc2.bias.as_mut() {
            b.fill(T::of(value));
        }
    }

    fn pool_after(&self, stage: usize) -> bool {
        stage < self.cfg.pool_stages
    }

    /// Forward pass over a batch `(N, K, Z, Y, X)`. In train mode BN uses
    /// batch statistics and dropout draws its mask from `dropout_seed`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Forward<T>, NetError> {
        let n = x.shape().first().copied().unwrap_or(0);
        if x.shape() != self.input_shape(n).as_slice() || n == 0 {
            return Err(NetError::Input {
                expected: self.input_shape(n.max(1)),
                found: x.shape().to_vec(),
            });
        }
        let mut stats = Vec::new();
        let mut pools = Vec::with_capacity(N_BLOCKS + 1);
        let pool = |h: Tensor<T>, on: bool, pools: &mut Vec<Option<PoolCache>>| {
            if on {
                let (y, c) = maxpool3d(&h)?;
                pools.push(Some(c));
                Ok::<_, LayerError>(y)
            } else {
                pools.push(None);
                Ok(h)
            }
        };

        let (conv1_pre, t1) = self.conv1.forward(x, mode, &mut stats)?;
        let mut h = pool(relu(&conv1_pre), self.pool_after(0), &mut pools)?;
        let mut block_tapes = Vec::with_capacity(N_BLOCKS);
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, t) = b.forward(&h, mode, &mut stats)?;
            block_tapes.push(t);
            h = pool(y, self.pool_after(i + 1), &mut pools)?;
        }
        let trunk_shape = h.shape().to_vec();
        let d = trunk_shape[1..].iter().product::<usize>();
        let flat = h.reshape(&[n, d])?;
        let fc1_pre = fully_connected(&flat, &self.fc1)?;
        let features = relu(&fc1_pre);
        let (fc2_in, mask) = match mode {
            Mode::Train if self.cfg.dropout_p > 0.0 => {
                let m = dropout_mask(features.shape(), self.cfg.dropout_p, dropout_seed, 0);
                (dropout_forward(&features, &m)?, Some(m))
            }
            _ => (features.clone(), None),
        };
        let out = fully_connected(&fc2_in, &self.fc2)?;
        Ok(Forward {
            output: out.data().iter().map(|v| v.as_f64()).collect(),
            features,
            bn_stats: stats,
            tape: Tape {
                conv1: t1,
                conv1_pre,
                pools,
                blocks: block_tapes,
                trunk_shape,
                flat,
                fc1_pre,
                mask,
                fc2_in,
            },
        })
    }

    /// Accumulates parameter gradients for `dL/d output = grad_out`.
    pub fn backward(&mut self, fwd: &Forward<T>, grad_out: &[f64]) -> Result<(), NetError> {
        let t = &fwd.tape;
        let n = fwd.output.len();
        if grad_out.len() != n {
            return Err(LayerError::Length(grad_out.len(), n).into());
        }
        let g = Tensor::from_vec(&[n, 1], grad_out.iter().map(|&v| T::of(v)).collect())?;
        let g2 = fully_connected_backward(&t.fc2_in, &self.fc2, &g)?;
        accumulate(&mut self.fc2, &g2.weights, &g2.bias)?;
        let gf = match &t.mask {
            Some(m) => dropout_backward(&g2.input, m)?,
            None => g2.input,
        };
        let g1 = fully_connected_backward(&t.flat, &self.fc1, &relu_backward(&t.fc1_pre, &gf)?)?;
        accumulate(&mut self.fc1, &g1.weights, &g1.bias)?;
        let mut gh = g1.input.reshape(&t.trunk_shape)?;
        for i in (0..N_BLOCKS).rev() {
            if let Some(c) = &t.pools[i + 1] {
                gh = maxpool3d_backward(&gh, c)?;
            }
            gh = self.blocks[i].backward(&t.blocks[i], &gh)?;
        }
        if let Some(c) = &t.pools[0] {
            gh = maxpool3d_backward(&gh, c)?;
        }
        self.conv1
            .backward(&t.conv1, &relu_backward(&t.conv1_pre, &gh)?)?;
        Ok(())
    }

    /// Folds training-mode batch statistics into the BN running averages.
    pub fn commit_bn(&mut self, stats: &[BatchStats]) -> Result<(), NetError> {
        let mut bns: Vec<&mut LayerParams<T>> = self
            .layers_mut()
            .into_iter()
            .filter(|p| p.bn.is_some())
            .collect();
        if bns.len() != stats.len() {
            return Err(LayerError::Length(stats.len(), bns.len()).into());
        }
        for (p, s) in bns.iter_mut().zip(stats) {
            update_running_stats(p, s)?;
        }
        Ok(())
    }

    /// Eval-mode predictions for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<f64>, NetError> {
        Ok(self.forward(x, Mode::Eval, 0)?.output)
    }

    /// Eval-mode FC1 activations, `(N, fc1_units)`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        Ok(self.forward(x, Mode::Eval, 0)?.features)
    }

    pub fn cast<U: Real>(&self) -> AgeCnn<U> {
        let cb = |c: &ConvBn<T>| ConvBn {
            conv: c.conv.cast(),
            bn: c.bn.cast(),
        };
        AgeCnn {
            cfg: self.cfg.clone(),
            conv1: cb(&self.conv1),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    a: cb(&b.a),
                    b: cb(&b.b),
                    shortcut: b.shortcut.as_ref().map(cb),
                })
                .collect(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

fn accumulate<T: Real>(
    p: &mut LayerParams<T>,
    gw: &Tensor<T>,
    gb: &Tensor<T>,
) -> Result<(), LayerError> {
    p.grad_weights.add_assign(gw)?;
    if let Some(b) = p.grad_bias.as_mut() {
        b.add_assign(gb)?;
    }
    Ok(())
}

impl AgeCnn<f32> {
    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        let layers: Vec<(String, &LayerParams<f32>)> = self.layers();
        save_checkpoint(dir, &layers, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetError> {
        let (meta, stored) = load_checkpoint(dir)?;
        let cfg: NetworkConfig = serde_json::from_value(meta)
            .map_err(|e| NetError::CheckpointMismatch(format!("config: {e}")))?;
        let mut model = Self::new(&cfg)?;
        let names: Vec<String> = model.layers().into_iter().map(|(n, _)| n).collect();
        if names.len() != stored.len() {
            return Err(NetError::CheckpointMismatch(format!(
                "{} layers stored, {} expected",
                stored.len(),
                names.len()
            )));
        }
        for ((name, slot), (sname, p)) in names.iter().zip(model.layers_mut()).zip(stored) {
            if *name != sname
                || p.weights.shape() != slot.weights.shape()
                || p.bias.as_ref().map(|b| b.shape().to_vec())
                    != slot.bias.as_ref().map(|b| b.shape().to_vec())
                || p.bn.is_some() != slot.bn.is_some()
            {
                return Err(NetError::CheckpointMismatch(format!("layer {sname}")));
            }
            *slot = p;
        }
        Ok(model)
    }
}
