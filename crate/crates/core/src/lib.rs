//! Class-incremental learning laboratory.
//!
//! Trains small multilayer perceptrons on synthetic class-incremental
//! benchmarks with several reference learners, then measures how stable and
//! how plastic their feature extractors are: classifier retraining on the full
//! label space, the stage-over-stage accuracy delta, layerwise CKA against the
//! base extractor, and t-SNE exports of feature shift.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod cil;
pub mod cli;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod repsim;

pub use error::{Error, Result};
