//! Optimization, training loop, evaluation metrics, and the paired
//! with/without-attention ablation.

mod ablation;
mod metrics;
mod optim;
mod trainer;

pub use ablation::{ablation_run, train_and_evaluate, AblationRow, AblationTable, TrainedRun};
pub use metrics::{argmax, ConfusionMatrix, MetricsReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use trainer::{
    evaluate, predict_proba, train, train_with_progress, EpochCurve, EpochRecord, LossKind, TrainConfig,
};
