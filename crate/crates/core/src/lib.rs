//! Semi-supervised pelvic organ segmentation with missing annotations.

pub mod augment;
pub mod autoclean;
pub mod data;
pub mod error;
pub mod impute;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod train;
mod rng;

pub use error::{Error, Result};

/// Crate version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
