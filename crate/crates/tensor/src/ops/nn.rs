use super::{check_axis, split_axis};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// How per-element losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Norm products below this are treated as zero vectors by [`Var::cosine_sim`].
const COSINE_ZERO: f64 = 1e-12;

impl<'t> Var<'t> {
    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(self, axis: usize, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::Param {
                op: "softmax",
                msg: format!("temperature must be positive and finite, got {temperature}"),
            });
        }
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        let inv_t = 1.0 / temperature;
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..n {
                    let e = ((xd[at(a)] - max) * inv_t).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    y[at(a)] /= z;
                }
            }
        }
        let y_bw = y.clone();
        let id = self.id;
        self.tape
            .push("softmax", Tensor::new(x.shape(), y)?, &[id], move |g, sink| {
                let slot = sink.slot(id);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let dot: f64 = (0..n).map(|a| g[at(a)] * y_bw[at(a)]).sum();
                        for a in 0..n {
                            slot[at(a)] += y_bw[at(a)] * (g[at(a)] - dot) * inv_t;
                        }
                    }
                }
            })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let (gv, bv) = (gamma.value(), beta.value());
        for p in [&gv, &bv] {
            if p.shape() != [c] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        self.tape
            .push("layer_norm", Tensor::new(&shape, y)?, &[xid, gid, bid], move |g, sink| {
                let gd = gv.data();
                if sink.wants(gid) {
                    let slot = sink.slot(gid);
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if sink.wants(bid) {
                    let slot = sink.slot(bid);
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] += g[r * c + j];
                        }
                    }
                }
                if sink.wants(xid) {
                    let slot = sink.slot(xid);
                    let cf = c as f64;
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = g[r * c + j] * gd[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        for j in 0..c {
                            let d = g[r * c + j] * gd[j];
                            slot[r * c + j] += inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                }
            })
    }

    /// Cosine similarity along the last axis; output keeps that axis with
    /// extent 1. Pairs where either vector has zero norm give 0.
    pub fn cosine_sim(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.rank() == 0 {
            return Err(TensorError::Shape {
                op: "cosine_sim",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = *a.shape().last().unwrap();
        let rows = a.numel() / c;
        let mut out = vec![0.0; rows];
        let mut norms = vec![(0.0, 0.0); rows];
        for r in 0..rows {
            let ar = &a.data()[r * c..(r + 1) * c];
            let br = &b.data()[r * c..(r + 1) * c];
            let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = (na, nb);
            if na * nb > COSINE_ZERO {
                out[r] = ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            }
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out_bw = out.clone();
        let (aid, bid) = (self.id, other.id);
        self.tape
            .push("cosine_sim", Tensor::new(&shape, out)?, &[aid, bid], move |g, sink| {
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for r in 0..rows {
                    let (na, nb) = norms[r];
                    if na * nb <= COSINE_ZERO {
                        continue;
                    }
                    let cs = out_bw[r];
                    for j in 0..c {
                        let (x, y) = (a.data()[r * c + j], b.data()[r * c + j]);
                        ga[r * c + j] = g[r] * (y / (na * nb) - cs * x / (na * na));
                        gb[r * c + j] = g[r] * (x / (na * nb) - cs * y / (nb * nb));
                    }
                }
                sink.add(aid, &ga);
                sink.add(bid, &gb);
            })
    }

    /// Pixel-wise cross-entropy. `self` holds logits with classes on the last
    /// axis; `labels` has one entry per leading position. Positions labelled
    /// `ignore` are skipped; if every position is skipped the loss is 0.
    pub fn cross_entropy(self, labels: &[u8], ignore: Option<u8>, reduction: Reduction) -> Result<Var<'t>> {
        let x = self.value();
        let classes = *x.shape().last().ok_or(TensorError::Invalid {
            op: "cross_entropy",
            msg: "scalar logits".into(),
        })?;
        let rows = x.numel() / classes;
        if labels.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; x.numel()];
        let mut total = 0.0;
        let mut counted = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if Some(label) == ignore {
                continue;
            }
            let label = label as usize;
            if label >= classes {
                return Err(TensorError::Data(format!(
                    "label {label} at position {r} is outside [0, {classes})"
                )));
            }
            let row = &x.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
            counted += 1;
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if counted > 0 => 1.0 / counted as f64,
            Reduction::Mean => 0.0,
        };
        let labels = labels.to_vec();
        let id = self.id;
        self.tape
            .push("cross_entropy", Tensor::scalar(total * scale), &[id], move |g, sink| {
                let slot = sink.slot(id);
                for (r, &label) in labels.iter().enumerate() {
                    if Some(label) == ignore {
                        continue;
                    }
                    for j in 0..classes {
                        let onehot = if j == label as usize { 1.0 } else { 0.0 };
                        slot[r * classes + j] += g[0] * scale * (probs[r * classes + j] - onehot);
                    }
                }
            })
    }
}
