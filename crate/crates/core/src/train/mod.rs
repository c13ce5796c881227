//! Optimization, the stage training procedures, and the composed
//! experimental conditions.

mod adamw;
mod condition;
mod engine;

pub use adamw::{AdamwConfig, Optimizer};
pub use condition::{
    compare_conditions, render_sweep_table, run_condition, sweep, Collection, Condition,
    ConditionReport, ConditionSpec, SweepGrid, SweepRow, TrialRow,
};
pub use engine::{
    coarse_tune, fine_tune, mlm_eval, pretrain_mlm, qdpp_accuracy, relevance_loss, EpochHook,
    EpochMetrics, TrainOutcome, TrainPlan,
};
