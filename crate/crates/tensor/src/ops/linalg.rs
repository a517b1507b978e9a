use super::attention::dot;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `a[m×k] += c[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc(c: &[f64], b: &[f64], a: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            a[i * k + p] += dot(crow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `b[k×n] += a[m×k]ᵀ · c[m×n]`
fn gemm_tn_acc(a: &[f64], c: &[f64], b: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &mut b[p * n..(p + 1) * n];
            for (bv, &cv) in brow.iter_mut().zip(crow) {
                *bv += av * cv;
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
        let stride_a: Vec<usize> = broadcast_strides(batch_a, &batch)
            .into_iter()
            .map(|s| s * m * k)
            .collect();
        let stride_b: Vec<usize> = broadcast_strides(batch_b, &batch)
            .into_iter()
            .map(|s| s * k * n)
            .collect();
        let nbatch: usize = batch.iter().product();
        let mut out = vec![0.0; nbatch * m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            let mut run = |o: usize, ia: usize, ib: usize| {
                gemm_acc(
                    &ad[ia..ia + m * k],
                    &bd[ib..ib + k * n],
                    &mut out[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                )
            };
            if batch.is_empty() {
                run(0, 0, 0);
            } else {
                for_each_broadcast(&batch, &stride_a, &stride_b, run);
            }
        }
        self.tape.add_macs((nbatch * m * k * n) as u64);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let (aid, bid) = (self.id, rhs.id);
        self.tape
            .push("matmul", Tensor::new(&out_shape, out)?, &[aid, bid], move |g, sink| {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = sink.wants(aid).then(|| vec![0.0; ad.len()]);
                let mut gb = sink.wants(bid).then(|| vec![0.0; bd.len()]);
                let mut run = |o: usize, ia: usize, ib: usize| {
                    let gc = &g[o * m * n..(o + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt_acc(gc, &bd[ib..ib + k * n], &mut ga[ia..ia + m * k], m, k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn_acc(&ad[ia..ia + m * k], gc, &mut gb[ib..ib + k * n], m, k, n);
                    }
                };
                if batch.is_empty() {
                    run(0, 0, 0);
                } else {
                    for_each_broadcast(&batch, &stride_a, &stride_b, run);
                }
                if let Some(ga) = ga {
                    sink.add(aid, &ga);
                }
                if let Some(gb) = gb {
                    sink.add(bid, &gb);
                }
            })
    }
}
