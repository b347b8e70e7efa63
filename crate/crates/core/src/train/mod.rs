//! Training runs, configuration files and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{default_schedule, Stage, TrainConfig, PATCH};
pub use trainer::{
    fit_tokenizer, model_config, train, Encoded, Evaluation, StageTiming, StepLog, TrainReport,
    TrainedModel,
};
