use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `p`-quantile of already sorted values, linear interpolation between the
/// closest order statistics (position `(n-1)·p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TensorError::Param {
            op: "quantile",
            msg: format!("p = {p} outside [0, 1]"),
        });
    }
    if sorted.is_empty() {
        return Err(TensorError::Invalid {
            op: "quantile",
            msg: "empty input".into(),
        });
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// Per-row quantiles: `scores` is `[B, N]`, `p` holds one level per row.
/// Returns `[B, 1]`.
pub fn quantile_rows(scores: &Tensor, p: &[f64]) -> Result<Tensor> {
    if scores.rank() != 2 || scores.shape()[0] != p.len() {
        return Err(TensorError::Shape {
            op: "quantile_rows",
            lhs: scores.shape().to_vec(),
            rhs: vec![p.len()],
        });
    }
    let n = scores.shape()[1];
    let out = p
        .iter()
        .enumerate()
        .map(|(b, &pb)| quantile(&scores.data()[b * n..(b + 1) * n], pb))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[p.len(), 1], out)
}
