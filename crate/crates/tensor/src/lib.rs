//! Dense tensors with a tape-based reverse-mode autodiff, an AdamW optimizer,
//! gradient clipping and the `ATK1` checkpoint format.
//!
//! The tape ([`Graph`]) records every forward op together with whatever
//! activations its backward pass needs. Parameters live outside the tape in a
//! [`ParamStore`] and are bound lazily into a [`Session`] the first time a
//! forward pass touches them.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Session};
pub use real::Real;
pub use tensor::Tensor;
