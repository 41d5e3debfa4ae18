//! Synthetic clustered-Markov language modelling, AdamW and the training loop.

mod optim;
mod task;
mod train;

pub use optim::{adam_step, AdamHyper, AdamState};
pub use task::{Batch, SyntheticTask};
pub use train::{train, StepMetrics, TrainConfig, TrainOutcome, DIVERGENCE_PATIENCE, DIVERGENCE_RATIO};
