//! Optimization: initialization, Adagrad, the training loop and checkpoints.

pub mod adagrad;
pub mod checkpoint;
pub mod config;
pub mod init;
pub mod trainer;

pub use adagrad::AdagradState;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use trainer::{evaluate, MetricRow, Split, TrainError, Trainer, METRICS_HEADER};
