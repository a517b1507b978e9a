//! Scaled dot-product attention split over heads.

use std::rc::Rc;

use fuseg_tensor::{Tensor, Var};

use crate::error::Result;

/// Attends `q: [B, Nq, C]` over `k, v: [B, Nk, C]` with `heads` heads.
///
/// `bias` is added to the logits and has shape `[heads, Nq, Nk]`.
/// Returns the merged output `[B, Nq, C]` and the weights `[B, heads, Nq, Nk]`.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    bias: Option<Var<'t>>,
) -> Result<(Var<'t>, Rc<Tensor>)> {
    Ok(q.attention(k, v, heads, bias)?)
}
