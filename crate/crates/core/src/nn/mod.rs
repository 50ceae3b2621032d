//! Minimal deterministic neural-network engine.
//!
//! Staged MLP feature extractors with activation taps, linear and cosine
//! classifier heads, masked cross-entropy and distillation losses, exact
//! reverse-mode gradients, plain SGD, and MAC counting. There is no
//! normalization layer, so "freezing" an extractor is purely a matter of not
//! updating its parameters.

mod checkpoint;
mod extractor;
mod gradcheck;
mod head;
mod loss;
mod network;

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_VERSION};
pub use extractor::{ArchSpec, FeatureExtractor, Layer, LayerGrad, Stage};
pub use gradcheck::{gradient_check, GradCheck};
pub use head::{
    CosineClassifier, Head, HeadGrad, HeadKind, HeadSpec, LinearClassifier, DEFAULT_COSINE_SCALE,
};
pub use loss::{cross_entropy_masked, distill_loss};
pub use network::{count_macs, extractor_digest, DistillTerm, GradientSet, LossSpec, Network};
