use super::{check_axis, split_axis};
use crate::error::Result;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn sum_all(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.numel();
        let id = self.id;
        self.tape.push("sum_all", Tensor::scalar(x.sum()), &[id], move |g, sink| {
            let slot = sink.slot(id);
            debug_assert_eq!(slot.len(), n);
            for v in slot.iter_mut() {
                *v += g[0];
            }
        })
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    fn reduce_axis(self, axis: usize, keepdim: bool, scale: f64, op: &'static str) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(op, x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for a in 0..n {
                let row = &xd[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let id = self.id;
        self.tape.push(op, Tensor::new(&shape, out)?, &[id], move |g, sink| {
            let slot = sink.slot(id);
            for o in 0..outer {
                let gr = &g[o * inner..(o + 1) * inner];
                for a in 0..n {
                    let dst = &mut slot[(o * n + a) * inner..(o * n + a + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(gr) {
                        *d += s * scale;
                    }
                }
            }
        })
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, keepdim, 1.0, "sum_axis")
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        self.reduce_axis(axis, keepdim, 1.0 / n as f64, "mean_axis")
    }

    /// Global average pooling over the token axis: `[B, N, C] -> [B, C]`.
    pub fn gap(self) -> Result<Var<'t>> {
        self.mean_axis(1, false)
    }
}
