//! Optimization of the trainable partition with the backbone frozen.

mod config;
mod metrics;
mod optim;
mod train;

pub use config::{OptimizerKind, TrainConfig};
pub use metrics::{EpochMetrics, Metrics};
pub use optim::{adamw_step, sgd_step, OptimizerState};
pub use train::{argmax, evaluate, predict, train, Evaluation, TrainOutcome};
