//! Loss, manual gradients, optimizer and the training loop.

pub mod adam;
pub mod backward;
pub mod config;
pub mod loss;
mod trainer;

pub use adam::{adam_step, Adam, AdamConfig};
pub use backward::{backward, batch_loss, GradientSet, LossBreakdown};
pub use config::{preset, TrainConfig, PRESET_NAMES};
pub use loss::{aux_loss, recon_loss, routing_stats, RoutingStats};
pub use trainer::{init_model, train, train_with, StepReport, TrainOutcome};
