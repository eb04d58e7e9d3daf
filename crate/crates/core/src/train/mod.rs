//! Target assignment, loss, optimiser and the training loop.

pub mod loss;
pub mod optim;
pub mod targets;
pub mod trainer;

pub use loss::{detection_loss, LossOutput, LossWeights};
pub use optim::{Adam, AdamConfig};
pub use targets::{assign_targets, Positive, Targets};
pub use trainer::{sample_gradients, train, EpochLog, Phase, TrainOutcome, TrainSettings};
