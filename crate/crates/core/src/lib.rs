//! Stacked autoregressive affine flows with representation alignment routed
//! through the forward graph, a detached block, or the generative (reverse)
//! graph, plus training-free classification by a single gradient step over
//! soft class logits.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod classify;
pub mod error;
pub mod flow;
pub mod graph;
pub mod harness;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{backward, cut, GraphValue, ParamSet};
pub use tensor::Tensor;
