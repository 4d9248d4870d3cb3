//! Dataset condensation by distribution matching.

pub mod analysis;
pub mod augmentation;
pub mod baselines;
pub mod condense;
pub mod config;
pub mod continual;
pub mod datasets;
pub mod evaluation;
pub mod export;
mod error;
pub mod format;
pub mod nas;
pub mod networks;
pub mod repro;
pub mod report;
pub mod synthetic;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
