//! Desk-scale unlearning experiments: synthetic task, pretraining, toy
//! objectives and the enforcement-aware training loop.

mod objective;
mod run;
mod task;
mod train;

pub use objective::{objective_grad, Objective, ObjectiveParams, Reference};
pub use run::{
    cached_stability, sweep_eps, unlearn_run, CostReport, Enforcement, EnforcementSummary,
    RunReport, SweepRow, UnlearnConfig, SWEEP_EPS,
};
pub use task::{generate_task, Split, SyntheticTask, TaskConfig};
pub use train::{
    init_network, mask_gradients, mean_cross_entropy, pretrain, selection_census, train_classifier, Adam,
    ExpertCensus, PretrainConfig, PretrainReport, SplitOptimizer, Trainable, INIT_SEED_OFFSET,
};
