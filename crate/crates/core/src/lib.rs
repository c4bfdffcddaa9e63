//! Adaptive LiDAR scanning: range-image geometry, synthetic scenes,
//! history-aware query prediction, differentiable scan masks, voxelization,
//! a query-based fusion detector and the training losses.

pub mod boxes;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod maskgen;
pub mod nn;
pub mod predictor;
pub mod rangeimage;
pub mod scenesim;
pub mod voxelizer;

pub use error::{CoreError, Result};
