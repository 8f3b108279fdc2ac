//! Per-command reproducibility records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use brainage_core::pipeline::PipelineConfig;

use crate::StageError;

/// SHA-256 over a file, or over the sorted `(relative path, file hash)`
/// list of a directory tree.
pub fn digest(path: &Path) -> Result<String, StageError> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, file) in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(digest(&file)?.as_bytes());
            h.update(*b"\n");
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| StageError::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), StageError> {
    for entry in fs::read_dir(dir).map_err(|e| StageError::io(dir, e))? {
        let path = entry.map_err(|e| StageError::io(dir, e))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked from root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Record<'a> {
    pub command: &'a str,
    pub tool_version: &'static str,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub config: &'a PipelineConfig,
    /// Digest of every stage output this command read, keyed by path
    /// relative to the work directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn digests(root: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, StageError> {
    paths
        .iter()
        .map(|p| Ok((relative(root, p), digest(p)?)))
        .collect()
}

pub fn write(path: &Path, record: &Record<'_>) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StageError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(record).expect("plain data");
    fs::write(path, text + "\n").map_err(|e| StageError::io(path, e))
}
