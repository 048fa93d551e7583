//! Learned image codec with energy-based channel gating and a
//! rate-conditioned latent modulator.

pub mod cli;
pub mod codec;
pub mod coder;
pub mod data;
pub mod error;
pub mod gating;
pub mod init;
pub mod metrics;
pub mod modulator;
pub mod training;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Train mode uses additive quantization noise and soft gates; eval mode
/// rounds and uses hard gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
