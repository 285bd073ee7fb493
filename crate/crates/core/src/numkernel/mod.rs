//! Dense `f64` tensors with reverse-mode differentiation, sized for training
//! the pair comparator on CPU.

pub mod kernels;
pub mod layers;
mod tape;
mod tensor;

pub use layers::{cross_attention, mhsa, AttentionVars};
pub use tape::{BatchStats, Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;
