//! Sparse autoencoders with routed experts: models, training, synthetic data
//! and evaluation metrics.

pub mod datagen;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Architecture, SaeModel, ScaleSae, ScalingMode};
pub use rng::Rng;
