//! Multi-channel caption transformer (MCT) and its ELMo word-embedding
//! variant, desk scale: a dense f64 tensor core with reverse-mode autodiff,
//! a region-feature encoder, a masked/cross-modal attention decoder, training
//! with Adam and cross-entropy, and corpus caption metrics
//! (BLEU-1..4, ROUGE-L, CIDEr-D).
//!
//! Region features are always consumed from files; no detector runs here.
//! With the `parallel` feature (default) the batch gradient, generation and
//! metric loops run on rayon; the sequential path is the fallback and both
//! produce bit-identical results because reductions happen in a fixed order.

pub mod data;
pub mod decoder;
pub mod embedder;
pub mod encoder;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use model::{Mode, Model};
pub use tensor::{Tape, Tensor};
