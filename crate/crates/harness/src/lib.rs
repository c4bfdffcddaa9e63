//! Orchestration for adaptive LiDAR scanning: data generation, detector
//! pretraining, the three training stages, both evaluation protocols,
//! baseline comparison and energy accounting.

pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradsuite;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod run;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
