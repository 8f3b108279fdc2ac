//! 3D residual CNN regressing age from a multi-channel FC image.
//!
//! Layout: Conv(3³)+BN+ReLU, three residual blocks, FC1+ReLU, dropout and
//! a single-output FC2. A 2×2×2 max pool follows conv1 and each block, up
//! to `pool_stages` of them.

mod network;
mod train;

pub use network::{AgeCnn, Forward, NetError};
pub use train::{
    lr_at, sgd_step, stack, train, write_trace, Sample, TraceRow, TrainConfig, TrainError,
};

use serde::{Deserialize, Serialize};

/// Number of residual blocks.
pub const N_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub resblock_filters: [usize; N_BLOCKS],
    pub fc1_units: usize,
    pub dropout_p: f64,
    pub input_grid: [usize; 3],
    /// Pools after conv1, then after blocks 1..3, in that order.
    pub pool_stages: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 56,
            conv1_filters: 64,
            resblock_filters: [64, 128, 128],
            fc1_units: 256,
            dropout_p: 0.5,
            input_grid: [16, 16, 16],
            pool_stages: N_BLOCKS + 1,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Checks the configuration; errors carry the offending field name.
    pub fn check(&self) -> Result<(), NetError> {
        let bad = |field: &str, reason: &str| {
            Err(NetError::Config {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive");
        }
        if self.conv1_filters == 0 {
            return bad("conv1_filters", "must be positive");
        }
        if self.resblock_filters.contains(&0) {
            return bad("resblock_filters", "must be positive");
        }
        if self.fc1_units == 0 {
            return bad("fc1_units", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p", "must lie in [0, 1)");
        }
        if self.pool_stages > N_BLOCKS + 1 {
            return bad("pool_stages", "at most 4");
        }
        let need = 1usize << self.pool_stages;
        for (axis, &e) in self.input_grid.iter().enumerate() {
            if e < need {
                return Err(NetError::GridTooSmall {
                    axis,
                    extent: e,
                    need,
                });
            }
        }
        Ok(())
    }

    /// Spatial grid entering FC1.
    pub fn final_grid(&self) -> [usize; 3] {
        let mut g = self.input_grid;
        for _ in 0..self.pool_stages {
            g = crate::ops::pooled_grid(g);
        }
        g
    }

    pub fn flat_features(&self) -> usize {
        self.resblock_filters[N_BLOCKS - 1] * self.final_grid().iter().product::<usize>()
    }
}
