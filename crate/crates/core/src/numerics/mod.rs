//! Dense-array math with reverse-mode differentiation.

pub mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use rng::Rng;
pub use scalar::{gemm, Scalar, Strided};
pub use tape::{logsumexp, softmax_in_place, FlopScope, Gradients, ParamId, Tape, Var, ZERO_SLOT};
pub use tensor::Tensor;
