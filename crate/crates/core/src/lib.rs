//! Data-driven RF tomography workbench: simulation of RSS campaigns over a
//! square node perimeter, change detection, a CNN reconstruction model with
//! one-shot adaptation, a regularized linear baseline, and evaluation.

pub mod baseline;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod image;
pub mod kv;
pub mod neural;
pub mod postprocess;
pub mod preprocess;
pub mod simulator;

pub use error::{Error, Result};
