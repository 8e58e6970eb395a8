//! Low-rank (truncated SVD) compression of attention-based skeleton action
//! classifiers: linear algebra, layers, a small transformer-style model,
//! synthetic data, compression planning and fine-tuning.

#[cfg(feature = "cli")]
pub mod cli;
pub mod compress;
pub mod container;
pub mod data;
pub mod error;
pub mod finetune;
pub mod layers;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
