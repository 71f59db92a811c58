//! Synthetic referring-segmentation harness: scene generation, splits,
//! training, evaluation, the ablation ladder and mask dumps.

pub mod ablation;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod split;
pub mod train;

pub use error::{Error, Result};
