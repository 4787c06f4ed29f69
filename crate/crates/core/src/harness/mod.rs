//! Experiment orchestration: holdout splits, folds, training loops, checkpoints and
//! evaluation.

mod config;
mod rundir;
mod source;
mod split;
mod train;

pub use config::{OptimizerKind, TrainConfig};
pub use rundir::{history_csv, RunDir};
pub use source::{DiskSource, InMemorySource, SampleSource};
pub use split::{carve_validation, make_folds, make_stratified_folds, split_dataset, split_ids, FoldPlan};
pub use train::{
    cross_validate, evaluate, evaluate_model, predict_sample, stack_batch, train, train_step, CrossValidation,
    EpochRecord, TrainOutcome,
};

/// Fraction of ids used for training in the holdout protocol.
pub const TRAIN_FRACTION: f64 = 0.8;
