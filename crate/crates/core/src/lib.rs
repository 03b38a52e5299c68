//! Attention-augmented GRU autoencoder for daily behavioral time series,
//! jointly trained for reconstruction and a binary outcome, with Gaussian
//! mixture subtyping of the learned embeddings and the evaluation battery
//! that goes with it.

pub mod baselines;
pub mod clustering;
pub mod data;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use math::Matrix;
pub use rng::Rng;
