//! Desk-scale Mixture-of-Experts toolkit.
//!
//! * [`tensor`] and [`autograd`]: named-dimension `f64` tensors, einsum and a
//!   reverse-mode tape.
//! * [`routing`]: top-K gating with expert capacity and the auxiliary losses.
//! * [`model`]: pre-norm transformer with dense SwiGLU and sparse MoE blocks.
//! * [`sharding`]: 3D (Data, Expert, Model) mesh sharding and step-time model.
//! * [`budget`]: dense compute budgets and the MoE token allocation they buy.
//! * [`train`]: synthetic corpus, AdamW, schedule and the training loop.

pub mod autograd;
pub mod budget;
pub mod error;
pub mod model;
pub mod routing;
pub mod sharding;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
