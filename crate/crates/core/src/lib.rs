//! Deep embedded image clustering: a transformer autoencoder with a 2-D clustering space,
//! density-peak centers and neighbor-weighted soft assignments refined by self-training.

pub mod cli;
pub mod cluster_head;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
