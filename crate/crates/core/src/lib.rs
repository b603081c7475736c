//! Monocular 3D lane detection: virtual-camera normalization, a depth-aware
//! front-view backbone with teacher-feature distillation, a multi-scale
//! front-view→BEV transformation, keypoint lane decoding, per-lane CRF
//! refinement, and the lane evaluation protocol.

pub mod ablation;
pub mod bevhead;
pub mod cli;
pub mod config;
pub mod crf;
pub mod data;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod lane;
pub mod metrics;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod plot;
pub mod nn;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
