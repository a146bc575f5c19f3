//! Geometry-aware unpaired image domain adaptation.
//!
//! Images are adapted from a source domain X to a target domain Y in two
//! coupled spaces: a spatial module predicts a (code-conditioned) geometric
//! transform, and a pair of generators fills the exposed background and
//! translates appearance. Training uses a cycle objective split into an
//! appearance term, a parameter-space spatial term and a region-missing term.

pub mod batch;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod synthetic;
pub mod verify;

pub use batch::{ImageBatch, ValidityMask};
pub use config::{parse_config, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{TransformKind, TransformOperator, TransformParams};
pub use networks::{NetworkConfig, Networks, SpatialCode};
pub use pipeline::{CycleBundle, Direction};
