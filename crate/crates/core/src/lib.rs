//! Minute-resolution EV charging event prediction from household smart-meter
//! load with a patch-based transformer encoder.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod tensorkit;
pub mod train;

pub use error::{Error, Result};
