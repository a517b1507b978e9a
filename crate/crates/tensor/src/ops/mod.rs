//! Differentiable primitives on [`Var`](crate::Var).

mod attention;
pub(crate) mod elementwise;
pub mod elementwise_fns {
    pub use super::elementwise::{gelu, sigmoid};
}
mod linalg;
mod nn;
mod reduce;
mod shape;
mod spatial;

pub use nn::Reduction;
pub use shape::concat;
pub use spatial::SparseMap;

use crate::error::{Result, TensorError};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}
