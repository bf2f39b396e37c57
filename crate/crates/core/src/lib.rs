//! Self-training with balanced top-k pseudo-label selection and cosine-KNN
//! alignment in a learned latent space.
//!
//! The pipeline: [`data`] loads or [`synth`] generates a dataset, [`engine`]
//! runs the self-training loop over a [`model`] trained with the [`losses`],
//! [`strategies`] pick pseudo-labels each cycle, and [`report`] turns traces
//! into summaries, convergence curves, and ablation tables.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod model;
pub mod report;
pub mod strategies;
pub mod synth;

pub use error::{Error, Result};
