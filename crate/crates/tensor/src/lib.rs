//! Dense `f64` tensors with tape-based reverse-mode differentiation and the
//! primitives used by the segmentation model: batched matmul, softmax with
//! temperature, layer norm, cosine similarity, token-grid pooling and
//! convolution, quantiles and pixel-wise cross-entropy.

mod error;
pub mod gradcheck;
pub mod ops;
mod params;
mod rng;
pub mod stats;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{concat, Reduction, SparseMap};
pub use params::{ParamId, ParamStore, Session};
pub use rng::{mix_seed, Rng};
pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

pub use ops::elementwise_fns::{gelu, sigmoid};
