//! Bird's-eye-view panoptic segmentation machinery: camera geometry and
//! inverse perspective mapping, loss weighting, LiDAR label generation,
//! panoptic fusion, evaluation metrics and a synthetic scene generator.

pub mod camera;
pub mod commands;
pub mod config;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod labels;
pub mod metrics;
pub mod panoptic;
pub mod raster;
pub mod synth;
pub mod weighting;

pub use error::{Error, Result};
