//! Command-line front end for the brain-age pipeline.

pub mod layout;
pub mod repro;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use brainage_core::pipeline::{ConfigError, FeatureKind, ModelKind, PipelineConfig};

pub use layout::Layout;
pub use stages::{Ctx, Report};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("missing input {} (produced by `{producer}`)", path.display())]
    MissingInput { path: PathBuf, producer: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Volume(#[from] brainage_core::volume_io::IoError),
    #[error(transparent)]
    Synth(#[from] brainage_core::synth::SynthError),
    #[error(transparent)]
    Decomp(#[from] brainage_core::icn::DecompError),
    #[error(transparent)]
    Fc(#[from] brainage_core::fc::FcError),
    #[error(transparent)]
    Folds(#[from] brainage_core::analysis::FoldError),
    #[error(transparent)]
    Analysis(#[from] brainage_core::analysis::AnalysisError),
    #[error(transparent)]
    Lasso(#[from] brainage_core::baselines::LassoError),
    #[error(transparent)]
    Net(#[from] brainage_core::cnn::NetError),
    #[error(transparent)]
    Experiment(#[from] brainage_core::pipeline::ExperimentError),
}

impl StageError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "brainage",
    version,
    about = "Brain-age prediction from resting-state FC maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline config (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Work directory (overrides paths.work_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub feature_kind: Option<FeatureKind>,
    #[arg(long, global = true)]
    pub model_kind: Option<ModelKind>,
    /// Outer fold for `train` and `predict`.
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Require run-to-run identical outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth,
    /// Fit group and subject ICNs.
    Decompose,
    /// Compute whole-brain and inter-ICN FC features.
    Fcmap,
    /// Train one model on one fold's training subjects.
    Train,
    /// Predict one fold's held-out subjects with a trained model.
    Predict,
    /// Run the full cross-validated comparison.
    Evaluate,
    /// Channel-ablation sensitivity of the fold CNNs.
    Sensitivity,
    /// t-SNE of learned and raw features.
    Embed,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Decompose => "decompose",
            Self::Fcmap => "fcmap",
            Self::Train => "train",
            Self::Predict => "predict",
            Self::Evaluate => "evaluate",
            Self::Sensitivity => "sensitivity",
            Self::Embed => "embed",
        }
    }
}

/// Loads the config and applies command-line overrides, then validates.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, StageError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(StageError::MissingInput {
                    path: p.clone(),
                    producer: "--config".into(),
                });
            }
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.synth.seed = s;
        cfg.icn.seed = s;
        cfg.network.init_seed = s;
        cfg.train.seed = s;
        cfg.cv.seed = s;
        cfg.tsne.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.paths.work_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and writes its reproducibility record.
pub fn run(cli: &Cli) -> Result<Report, StageError> {
    let cfg = resolve_config(cli)?;
    let layout = Layout::new(&cfg.paths.work_dir);
    let ctx = Ctx {
        cfg: cfg.clone(),
        layout: layout.clone(),
        feature: cli.feature_kind,
        model: cli.model_kind,
        fold: cli.fold,
    };
    let report = match cli.command {
        Command::Synth => stages::synth(&ctx),
        Command::Decompose => stages::decompose(&ctx),
        Command::Fcmap => stages::fcmap(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Predict => stages::predict(&ctx),
        Command::Evaluate => stages::evaluate(&ctx),
        Command::Sensitivity => stages::sensitivity(&ctx),
        Command::Embed => stages::embed(&ctx),
    }?;
    let record = repro::Record {
        command: cli.command.name(),
        tool_version: env!("CARGO_PKG_VERSION"),
        deterministic: cli.deterministic,
        threads: cli.threads,
        config: &cfg,
        inputs: repro::digests(&layout.root, &report.inputs)?,
        outputs: repro::digests(&layout.root, &report.outputs)?,
    };
    repro::write(&layout.repro(cli.command.name()), &record)?;
    Ok(report)
}
