//! RGB to sensor RAW reconstruction.
//!
//! The crate covers the whole pipeline: paired patch sampling, the
//! multi-head gamma-space network with its training loop, tiled full-image
//! conversion and PSNR/SSIM evaluation.

pub mod checkpoint;
pub mod converter;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod sampling;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
