//! Window-fused visual tokens for autoregressive image generation over discrete
//! codes.
//!
//! Spatially local visual tokens are merged along the channel dimension
//! before a decoder-only transformer and split back apart after it, so the
//! transformer runs on `s²` times fewer visual positions while training and
//! decoding keep the next-token contract (at fused-token granularity).
//!
//! All math is generic over [`Scalar`]; the crate-root aliases fix it to
//! `f64`, which is what the training and decoding drivers use.

// `!(x >= lo)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod shuffle;
pub mod vocab;

pub use error::{Error, Result};
pub use numerics::{Rng, Scalar};

pub type Array = numerics::Tensor<f64>;
pub type Tape<'p> = numerics::Tape<'p, f64>;
pub type Gradients = numerics::Gradients<f64>;
pub type ParamStore = model::ParamStore<f64>;
pub type Model = model::Model<f64>;
pub type AdamW = model::AdamW<f64>;
