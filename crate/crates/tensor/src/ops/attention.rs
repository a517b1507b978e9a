use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

impl<'t> Var<'t> {
    /// Multi-head scaled dot-product attention.
    ///
    /// `self` holds queries `[B, Nq, C]`, `k` and `v` are `[B, Nk, C]`; head
    /// `h` uses channels `h·d .. (h+1)·d` with `d = C / heads`. `bias` is an
    /// optional additive logit bias `[heads, Nq, Nk]` shared by the batch.
    /// Returns the merged output `[B, Nq, C]` and the attention weights
    /// `[B, heads, Nq, Nk]` (not differentiable).
    pub fn attention(self, k: Var<'t>, v: Var<'t>, heads: usize, bias: Option<Var<'t>>) -> Result<(Var<'t>, Rc<Tensor>)> {
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        let (qs, ks) = (qt.shape(), kt.shape());
        let mismatch = || TensorError::Shape {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        };
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || vt.shape() != ks {
            return Err(mismatch());
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{} channels cannot be split into {heads} heads", qs[2]),
            });
        }
        let (b, nq, c) = (qs[0], qs[1], qs[2]);
        let nk = ks[1];
        let d = c / heads;
        let bt = bias.map(|x| x.value());
        if let Some(bt) = &bt {
            if bt.shape() != [heads, nq, nk] {
                return Err(TensorError::Shape {
                    op: "attention bias",
                    lhs: bt.shape().to_vec(),
                    rhs: vec![heads, nq, nk],
                });
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; b * heads * nq * nk];
        let mut out = vec![0.0; b * nq * c];
        {
            let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
            for bi in 0..b {
                for h in 0..heads {
                    for i in 0..nq {
                        let row = &mut probs[((bi * heads + h) * nq + i) * nk..][..nk];
                        let qrow = &qd[(bi * nq + i) * c + h * d..][..d];
                        let mut max = f64::NEG_INFINITY;
                        for (j, p) in row.iter_mut().enumerate() {
                            let mut s = scale * dot(qrow, &kd[(bi * nk + j) * c + h * d..][..d]);
                            if let Some(bt) = &bt {
                                s += bt.data()[(h * nq + i) * nk + j];
                            }
                            *p = s;
                            max = max.max(s);
                        }
                        let mut z = 0.0;
                        for p in row.iter_mut() {
                            *p = (*p - max).exp();
                            z += *p;
                        }
                        let orow = &mut out[(bi * nq + i) * c + h * d..][..d];
                        for (j, p) in row.iter_mut().enumerate() {
                            *p /= z;
                            axpy(*p, &vd[(bi * nk + j) * c + h * d..][..d], orow);
                        }
                    }
                }
            }
        }
        self.tape.add_macs((2 * b * nq * nk * c) as u64);
        let probs = Rc::new(Tensor::new(&[b, heads, nq, nk], probs)?);
        let p_bw = Rc::clone(&probs);
        let (qid, kid, vid) = (self.id, k.id, v.id);
        let bid = bias.map(|x| x.id);
        let mut inputs = vec![qid, kid, vid];
        inputs.extend(bid);
        let var = self
            .tape
            .push("attention", Tensor::new(&[b, nq, c], out)?, &inputs, move |g, sink| {
                let (qd, kd, vd, pd) = (qt.data(), kt.data(), vt.data(), p_bw.data());
                let mut gq = sink.wants(qid).then(|| vec![0.0; qd.len()]);
                let mut gk = sink.wants(kid).then(|| vec![0.0; kd.len()]);
                let mut gv = sink.wants(vid).then(|| vec![0.0; vd.len()]);
                let mut gb = bid.filter(|&id| sink.wants(id)).map(|_| vec![0.0; heads * nq * nk]);
                let mut ds = vec![0.0; nk];
                for bi in 0..b {
                    for h in 0..heads {
                        for i in 0..nq {
                            let prow = &pd[((bi * heads + h) * nq + i) * nk..][..nk];
                            let grow = &g[(bi * nq + i) * c + h * d..][..d];
                            let mut r = 0.0;
                            for j in 0..nk {
                                let voff = (bi * nk + j) * c + h * d;
                                let dp = dot(grow, &vd[voff..voff + d]);
                                if let Some(gv) = gv.as_mut() {
                                    axpy(prow[j], grow, &mut gv[voff..voff + d]);
                                }
                                ds[j] = dp;
                                r += prow[j] * dp;
                            }
                            for j in 0..nk {
                                ds[j] = prow[j] * (ds[j] - r);
                            }
                            if let Some(gb) = gb.as_mut() {
                                axpy(1.0, &ds, &mut gb[(h * nq + i) * nk..][..nk]);
                            }
                            let qoff = (bi * nq + i) * c + h * d;
                            for j in 0..nk {
                                let koff = (bi * nk + j) * c + h * d;
                                let w = scale * ds[j];
                                if let Some(gq) = gq.as_mut() {
                                    axpy(w, &kd[koff..koff + d], &mut gq[qoff..qoff + d]);
                                }
                                if let Some(gk) = gk.as_mut() {
                                    axpy(w, &qd[qoff..qoff + d], &mut gk[koff..koff + d]);
                                }
                            }
                        }
                    }
                }
                for (id, grad) in [(qid, gq), (kid, gk), (vid, gv)] {
                    if let Some(grad) = grad {
                        sink.add(id, &grad);
                    }
                }
                if let (Some(id), Some(grad)) = (bid, gb) {
                    sink.add(id, &grad);
                }
            })?;
        Ok((var, probs))
    }
}
