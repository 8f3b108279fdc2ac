//! Where each stage reads and writes under the work directory.

use std::path::{Path, PathBuf};

use brainage_core::pipeline::{FeatureKind, IcnScope, ModelKind};

use crate::StageError;

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn manifest(&self) -> PathBuf {
        self.cohort().join(brainage_core::synth::MANIFEST_FILE)
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.json")
    }

    /// Name of the ICN/FC unit serving `fold`.
    pub fn unit(scope: IcnScope, fold: usize) -> String {
        match scope {
            IcnScope::TrainingFold => format!("fold{fold}"),
            IcnScope::WholeCohort => "all".to_string(),
        }
    }

    pub fn icn(&self, unit: &str) -> PathBuf {
        self.root.join("icn").join(unit)
    }

    pub fn fc(&self, unit: &str) -> PathBuf {
        self.root.join("fc").join(unit)
    }

    pub fn fc_image(&self, unit: &str, id: &str) -> PathBuf {
        self.fc(unit).join(format!("{id}_fc.bvol"))
    }

    pub fn inter_icn(&self, unit: &str, id: &str) -> PathBuf {
        self.fc(unit).join(format!("{id}_inter.bvol"))
    }

    pub fn model(&self, feature: FeatureKind, model: ModelKind, fold: usize) -> PathBuf {
        self.root
            .join("models")
            .join(format!("{feature}_{model}"))
            .join(format!("fold{fold}"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn repro(&self, command: &str) -> PathBuf {
        self.root.join("repro").join(format!("{command}.json"))
    }
}

/// Fails with the missing path and the command that produces it.
pub fn require(path: &Path, producer: &str) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::MissingInput {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

pub fn create_dir(path: &Path) -> Result<(), StageError> {
    std::fs::create_dir_all(path).map_err(|e| StageError::io(path, e))
}
