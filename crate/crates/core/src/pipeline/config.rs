use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::TsneConfig;
use crate::baselines::{DEFAULT_MAX_PASSES, INNER_FOLDS, SCREEN_ALPHA};
use crate::cnn::{NetError, NetworkConfig, TrainConfig, TrainError};
use crate::fc::FcOrder;
use crate::synth::SynthConfig;

/// Which subjects the group ICN maps may be fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IcnScope {
    /// Per outer fold, training subjects only.
    #[default]
    TrainingFold,
    /// Once on every subject (leaks test subjects into the maps).
    WholeCohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcnConfig {
    pub k: usize,
    pub sparsity: f64,
    pub group_iters: usize,
    pub subject_iters: usize,
    pub seed: u64,
    pub scope: IcnScope,
}

impl Default for IcnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            sparsity: 0.1,
            group_iters: 100,
            subject_iters: 50,
            seed: 0,
            scope: IcnScope::TrainingFold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcConfig {
    pub downsample: [usize; 3],
    pub order: FcOrder,
}

impl Default for FcConfig {
    fn default() -> Self {
        Self {
            downsample: [1, 1, 1],
            order: FcOrder::FcThenDownsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub alpha: f64,
    pub inner_folds: usize,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            alpha: SCREEN_ALPHA,
            inner_folds: INNER_FOLDS,
            tol: 1e-5,
            max_passes: DEFAULT_MAX_PASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub top_k: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { top_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root of all stage outputs.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("brainage-run"),
        }
    }
}

/// Every stage's settings in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub icn: IcnConfig,
    pub fc: FcConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub lasso: LassoConfig,
    pub cv: CvConfig,
    pub tsne: TsneConfig,
    pub sensitivity: SensitivityConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale settings sized for the default synthetic cohort.
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            icn: IcnConfig::default(),
            fc: FcConfig::default(),
            network: NetworkConfig {
                in_channels: 8,
                conv1_filters: 8,
                resblock_filters: [8, 16, 16],
                fc1_units: 32,
                dropout_p: 0.5,
                input_grid: [16, 16, 16],
                pool_stages: 4,
                init_seed: 0,
            },
            train: TrainConfig {
                base_lr: 1e-4,
                momentum: 0.9,
                lr_drop_factor: 0.1,
                lr_step: 400,
                max_iters: 600,
                batch_size: 16,
                seed: 0,
                init_output_bias_to_mean: true,
            },
            lasso: LassoConfig::default(),
            cv: CvConfig::default(),
            tsne: TsneConfig::default(),
            sensitivity: SensitivityConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg = Self::from_json(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a possibly partial document. Omitted fields keep the values
    /// of [`PipelineConfig::default`], at any nesting depth.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
            match (base, over) {
                (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
                    for (k, v) in o {
                        match b.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let over: serde_json::Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, over);
        serde_json::from_value(base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Grid of the FC images after block-mean downsampling.
    pub fn fc_grid(&self) -> [usize; 3] {
        let mut g = self.synth.grid;
        for (e, f) in g.iter_mut().zip(self.fc.downsample) {
            *e = e.div_ceil(f.max(1));
        }
        g
    }

    /// Checks every section; errors carry the dotted path of the bad field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth
            .check()
            .map_err(|(f, r)| invalid(format!("synth.{f}"), r))?;

        let icn = &self.icn;
        if icn.k < 2 {
            return Err(invalid("icn.k", "must be >= 2"));
        }
        if !(icn.sparsity >= 0.0 && icn.sparsity.is_finite()) {
            return Err(invalid("icn.sparsity", "must be finite and >= 0"));
        }
        if icn.group_iters == 0 {
            return Err(invalid("icn.group_iters", "must be positive"));
        }
        if icn.subject_iters == 0 {
            return Err(invalid("icn.subject_iters", "must be positive"));
        }
        if self.fc.downsample.contains(&0) {
            return Err(invalid("fc.downsample", "factors must be positive"));
        }

        self.network.check().map_err(|e| match e {
            NetError::Config { field, reason } => invalid(format!("network.{field}"), reason),
            NetError::GridTooSmall { axis, extent, need } => invalid(
                "network.input_grid",
                format!("axis {axis} has extent {extent}, pooling needs >= {need}"),
            ),
            other => invalid("network", other.to_string()),
        })?;
        if self.network.in_channels != icn.k {
            return Err(invalid(
                "network.in_channels",
                format!("must equal icn.k ({})", icn.k),
            ));
        }
        if self.network.input_grid != self.fc_grid() {
            return Err(invalid(
                "network.input_grid",
                format!("must equal the FC grid {:?}", self.fc_grid()),
            ));
        }
        self.train.check().map_err(|e| match e {
            TrainError::Config { field, reason } => invalid(format!("train.{field}"), reason),
            other => invalid("train", other.to_string()),
        })?;

        let l = &self.lasso;
        if !(l.alpha > 0.0 && l.alpha <= 1.0) {
            return Err(invalid("lasso.alpha", "must lie in (0, 1]"));
        }
        if l.inner_folds < 2 {
            return Err(invalid("lasso.inner_folds", "must be >= 2"));
        }
        if !(l.tol > 0.0 && l.tol.is_finite()) {
            return Err(invalid("lasso.tol", "must be positive"));
        }
        if l.max_passes == 0 {
            return Err(invalid("lasso.max_passes", "must be positive"));
        }
        if self.cv.folds < 2 {
            return Err(invalid("cv.folds", "must be >= 2"));
        }
        if self.cv.folds > self.synth.n_subjects {
            return Err(invalid("cv.folds", "exceeds synth.n_subjects"));
        }
        if !(self.tsne.perplexity > 0.0 && self.tsne.perplexity.is_finite()) {
            return Err(invalid("tsne.perplexity", "must be positive"));
        }
        if self.tsne.iters == 0 {
            return Err(invalid("tsne.iters", "must be positive"));
        }
        if self.sensitivity.top_k == 0 || self.sensitivity.top_k > icn.k {
            return Err(invalid(
                "sensitivity.top_k",
                format!("must lie in 1..={}", icn.k),
            ));
        }
        if self.paths.work_dir.as_os_str().is_empty() {
            return Err(invalid("paths.work_dir", "must not be empty"));
        }
        Ok(())
    }
}
