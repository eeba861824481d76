//! Optimization (AdamW, cosine schedule), the pretraining and fine-tuning
//! loops, and evaluation metrics.

mod loops;
pub mod metrics;
mod optim;

pub use loops::{
    check_targets, epochs_csv, evaluate, finetune, finetune_with, predict_all, pretrain,
    pretrain_with, trace_csv, validation_loss, EpochRecord, FinetuneConfig, FinetuneOutcome,
    PretrainConfig, PretrainOutcome, StepRecord,
};
pub use metrics::{evaluate_metrics, EvalReport};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, OptimState, Schedule};
