//! Parameter checkpoints: one BVOL file per tensor plus `index.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BnState, LayerParams};
use crate::tensor::Tensor;
use crate::volume_io::{read_bvol, write_bvol, IoError};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint layer {name}: {reason}")]
    Layer { name: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BnEntry {
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    updates: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    weights: TensorEntry,
    bias: Option<TensorEntry>,
    bn: Option<BnEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    layers: Vec<LayerEntry>,
}

fn put(dir: &Path, file: String, t: &Tensor<f32>) -> Result<TensorEntry, CheckpointError> {
    write_bvol(dir.join(&file), t)?;
    Ok(TensorEntry {
        file,
        shape: t.shape().to_vec(),
    })
}

/// Writes named layers and a free-form metadata blob (e.g. the network
/// configuration). Gradients are not stored.
pub fn save_checkpoint(
    dir: &Path,
    layers: &[(String, &LayerParams<f32>)],
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(layers.len());
    for (name, p) in layers {
        let weights = put(dir, format!("{name}.weight.bvol"), &p.weights)?;
        let bias = match &p.bias {
            Some(b) => Some(put(dir, format!("{name}.bias.bvol"), b)?),
            None => None,
        };
        entries.push(LayerEntry {
            name: name.clone(),
            weights,
            bias,
            bn: p.bn.as_ref().map(|s| BnEntry {
                running_mean: s.running_mean.clone(),
                running_var: s.running_var.clone(),
                updates: s.updates,
            }),
        });
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&Index {
        meta,
        layers: entries,
    })
    .map_err(|e| CheckpointError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| IoError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}

fn get(dir: &Path, name: &str, e: &TensorEntry) -> Result<Tensor<f32>, CheckpointError> {
    let t = read_bvol(dir.join(&e.file))?;
    if t.shape() != e.shape.as_slice() {
        return Err(CheckpointError::Layer {
            name: name.to_string(),
            reason: format!(
                "{} has shape {:?}, index says {:?}",
                e.file,
                t.shape(),
                e.shape
            ),
        });
    }
    Ok(t)
}

/// Returns the metadata blob and the layers in stored order.
pub fn load_checkpoint(
    dir: &Path,
) -> Result<(serde_json::Value, Vec<(String, LayerParams<f32>)>), CheckpointError> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IoError::Io {
        path: path.clone(),
        source: e,
    })?;
    let index: Index = serde_json::from_str(&text).map_err(|e| CheckpointError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::with_capacity(index.layers.len());
    for l in index.layers {
        let weights = get(dir, &l.name, &l.weights)?;
        let bias = match &l.bias {
            Some(b) => Some(get(dir, &l.name, b)?),
            None => None,
        };
        let mut p = LayerParams::new(weights, bias);
        if let Some(bn) = l.bn {
            let c = p.weights.len();
            if bn.running_mean.len() != c || bn.running_var.len() != c {
                return Err(CheckpointError::Layer {
                    name: l.name,
                    reason: "running statistics do not match channel count".into(),
                });
            }
            if bn.running_var.iter().any(|&v| !(v >= 0.0)) {
                return Err(CheckpointError::Layer {
                    name: l.name,
                    reason: "negative running variance".into(),
                });
            }
            p.bn = Some(BnState {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                updates: bn.updates,
            });
        }
        out.push((l.name, p));
    }
    Ok((index.meta, out))
}
