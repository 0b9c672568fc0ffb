//! Optimizer, schedule, the adaptation loop and toy pretraining.

mod adapt;
mod optim;
mod pretrain;

pub use adapt::{
    adapt_epoch, build_hierarchy, evaluate, make_views, parse_trajectory_csv, run_adaptation,
    trajectory_csv, AdaptConfig, AdaptOutcome, AdaptSample, AdaptState, Components, EmaCadence,
    EpochStats, EvalSample, NormMode, TrajectoryRow, TRAJECTORY_HEADER,
};
pub(crate) use adapt::mix;
pub use optim::{adamw_step, cosine_lr, AdamParams, OptimizerState};
pub use pretrain::{pretrain_on, pretrain_toy, PretrainConfig};
