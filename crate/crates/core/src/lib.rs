pub mod audio;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod sequence;
pub mod visual;

pub use error::{Error, Result};
