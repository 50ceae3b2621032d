//! Dense linear algebra and seeded randomness.

mod matrix;
mod rng;

pub use matrix::{dot, double_center, gram, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{derive_seed, RngStream};
