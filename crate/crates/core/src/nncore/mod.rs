//! Small neural-network substrate: tensors, layers with hand-written
//! backward passes, cross-entropy, Adam, finite-difference checks and a
//! checkpoint format.
//!
//! Layers do not own their weights. Each holds [`ParamId`] handles into a
//! [`ParameterSet`], and each `backward` accumulates parameter gradients
//! there and returns the gradient with respect to its input. Gradients
//! are never written for frozen parameters.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::CausalSelfAttention;
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Activation, Dense, Embedding, LayerNorm, Mlp};
pub use loss::cross_entropy;
pub use lstm::Lstm;
pub use params::{ParamId, ParameterSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch { context: String, expected: String, found: String },
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
