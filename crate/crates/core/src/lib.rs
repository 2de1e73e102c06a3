//! Video scene parsing with predictive feature learning.
//!
//! The pipeline trains a frame-prediction GAN on unlabeled clips, turns its encoder into a
//! predictive parser, and finally fuses that parser with a single-frame parser through a
//! small adapter network. See the crate README for the stage order and CLI.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
