//! Dense tensors with a reverse-mode gradient tape.
//!
//! Values live on a [`Tape`]; every operation appends a node and, when any
//! input requires a gradient, a backward closure. [`Tape::backward`] sweeps
//! the nodes once in reverse creation order and accumulates gradients
//! additively. The same graph code runs at `f32` for training and at `f64`
//! for finite-difference checks through the [`Float`] trait.

mod attention;
mod error;
mod float;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
mod norm;
mod ops;
pub mod store;
mod tape;
mod tensor;

pub use attention::{AttentionOutput, AttnMask};
pub use error::{Result, TensorError};
pub use float::Float;
pub use nn::{Bound, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
