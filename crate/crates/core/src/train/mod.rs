//! Optimization, training orchestration, averaging, ensembling and
//! evaluation.

mod adamw;
pub mod checkpoint;
mod ensemble;
mod metrics;
mod run;

pub use adamw::AdamW;
pub use checkpoint::{from_checkpoint, to_checkpoint, Checkpoint};
pub use ensemble::{
    ensemble_weights, train_kfold, weighted_ensemble, Ensemble, KFoldOutcome, Weighting,
};
pub use metrics::{evaluate, Metrics};
pub use run::{
    average_last_k, evaluate_model, fit, init_model, mean_eval_loss, train_run, EpochLoss,
    RunRecord, TrainConfig, TrainOutcome,
};
