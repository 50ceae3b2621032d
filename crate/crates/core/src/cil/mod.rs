//! Class-incremental protocol: synthetic data, splits, exemplar memory, and
//! the stage learners (Naive, Distill, Exploit, DER, partial DER, Oracle).
//!
//! Every random draw is derived by tag from a run seed, so a run is fully
//! determined by (dataset, split, hyperparameters, seed).

mod data;
mod split;
mod train;

pub use data::{Dataset, Part, SyntheticSpec};
pub use split::{make_split, select_exemplars, ExemplarStore, IncrementalSplit};
pub use train::{
    fit, fit_head, record_base, run_algorithm, run_from_base, train_base, train_oracle, train_stage,
    train_stage_der, train_stage_distill, train_stage_exploit, train_stage_naive, train_stage_pder,
    Algorithm, Hyper, Schedule, StageContext, StageModelSet, StageSnapshot, Teacher,
};
