//! Brain-age regression from voxel-wise resting-state functional connectivity.

pub mod analysis;
pub mod baselines;
pub mod cnn;
pub mod fc;
pub mod icn;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod volume;
pub mod volume_io;

pub use fc::{FcImage, InterIcnVector};
pub use icn::IcnSet;
pub use tensor::{Real, Tensor};
pub use volume::{Mask, Volume4D};
pub use volume_io::CohortManifest;
