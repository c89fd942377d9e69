//! One-stage 3D object detection toolkit: focal and composite detection losses,
//! voxelization, small dense and voxel-feature detectors on a tape-based
//! autodiff core, synthetic and KITTI-format data, training, and evaluation.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod manifest;
pub mod network;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};

/// Toolkit version recorded in checkpoints and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
