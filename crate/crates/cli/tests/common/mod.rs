#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brainage_core::pipeline::PipelineConfig;

/// A cohort small enough to run the whole pipeline in seconds.
pub fn tiny_config(work: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.n_subjects = 40;
    cfg.synth.grid = [8, 8, 8];
    cfg.synth.n_timepoints = 40;
    cfg.synth.n_components = 4;
    cfg.icn.k = 4;
    cfg.icn.group_iters = 20;
    cfg.icn.subject_iters = 10;
    cfg.network.in_channels = 4;
    cfg.network.conv1_filters = 4;
    cfg.network.resblock_filters = [4, 4, 4];
    cfg.network.fc1_units = 8;
    cfg.network.input_grid = [8, 8, 8];
    cfg.network.pool_stages = 3;
    cfg.train.max_iters = 20;
    cfg.train.lr_step = 10;
    cfg.train.batch_size = 8;
    cfg.tsne.perplexity = 5.0;
    cfg.tsne.iters = 300;
    cfg.sensitivity.top_k = 2;
    cfg.paths.work_dir = work.to_path_buf();
    cfg
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

pub fn brainage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainage"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub const STAGES: [&str; 6] = [
    "synth",
    "decompose",
    "fcmap",
    "evaluate",
    "sensitivity",
    "embed",
];

/// Runs every stage in order, panicking with stderr on failure.
pub fn run_pipeline(config: &Path, extra: &[&str]) {
    for stage in STAGES {
        let mut args = vec![stage, "--config", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = brainage(&args);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
    }
}
