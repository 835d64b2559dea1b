//! Optimisation loop, learning-rate schedule, evaluation and metrics.

pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

#[cfg(test)]
mod tests;

pub use metrics::{f1_score, metrics, ClassMetrics, ConfusionMatrix, Metrics};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};
pub use schedule::lr_schedule;
pub use trainer::{
    evaluate, metrics_row, predict_logits, train_epoch, EpochLog, Evaluation, MetricsLog, ScheduleUnit, TensorDataset,
    TrainConfig, TrainState, METRICS_HEADER,
};
