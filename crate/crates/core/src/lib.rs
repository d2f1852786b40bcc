//! Noisy-label domain-generalized sequence classification.
//!
//! Everything needed to train and evaluate a small sequence classifier
//! under injected label noise across multiple synthetic source domains:
//! a reverse-mode autodiff tape, spectral transforms, label-corruption
//! kernels, domain-alignment and early-learning regularizers, the
//! composite training objective, a synthetic data generator, metrics,
//! and the training harness behind the CLI.

pub mod align;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod objective;
pub mod optim;
pub mod regularizers;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Tape, Var};
pub use spectral::{normalize_flatten, rfft_magnitude, Spectrum};
pub use tensor::Tensor;
