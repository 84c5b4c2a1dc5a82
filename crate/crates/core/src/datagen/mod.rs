//! Synthetic data generation and activation/ground-truth file formats.

pub mod activations;
pub mod synthetic;

pub use activations::{decode_activations, encode_activations, read_activations, write_activations, ActivationBatch};
pub use synthetic::{compose, gen_synthetic, read_truth, write_truth, GroundTruth, SyntheticSpec, ValueDistribution};
