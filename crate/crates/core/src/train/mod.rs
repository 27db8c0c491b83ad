//! Synthetic CTR task, asynchronous trainer and its serial oracle.

pub mod dataset;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod trainer;

pub use dataset::{generate_dataset, synthesize, Dataset, PlantedModel, SyntheticTaskSpec};
pub use eval::{auc, logloss};
pub use metrics::{append_csv, MetricsRecord, RunLabel, METRICS_CSV_HEADER};
pub use model::{max_relative_error, ToyModel};
pub use reference::serial_reference;
pub use trainer::{evaluate_holdout, model_of, train, DestKind, Sampler, TrainReport, TrainerConfig, TrajectoryPoint};

#[cfg(test)]
mod tests;
