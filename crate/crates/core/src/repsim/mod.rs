//! Representation-similarity estimators and feature-shift embedding.
//!
//! Full-batch CKA uses the biased HSIC estimator over double-centered linear
//! kernels. Layerwise sweeps use the streaming mini-batch form built on the
//! unbiased HSIC₁ estimator, which tolerates evaluation sets far larger than
//! a single Gram matrix.

mod cka;
mod hsic;
mod tsne;

pub use cka::{
    cka_full, cka_unbiased, layerwise_cka, minibatch_cka, CkaAccumulator, LayerTapSet,
    DEFAULT_CKA_BATCH, DEFAULT_CKA_PASSES,
};
pub use hsic::{hsic_biased, hsic_unbiased};
pub use tsne::{tsne_embed, TsneParams, TsneResult};
