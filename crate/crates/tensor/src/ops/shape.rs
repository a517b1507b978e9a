use super::{check_axis, split_axis};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{strides, Tensor};

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        let id = self.id;
        self.tape.push("reshape", value, &[id], move |g, sink| sink.add(id, g))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(shape);
        // Input offset step for each output axis.
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src = permuted_offsets(&out_shape, &gather);
        let data: Vec<f64> = src.iter().map(|&s| x.data()[s]).collect();
        let id = self.id;
        self.tape
            .push("permute", Tensor::new(&out_shape, data)?, &[id], move |g, sink| {
                let slot = sink.slot(id);
                for (o, &s) in src.iter().enumerate() {
                    slot[s] += g[o];
                }
            })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if start + len > n {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {n}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let id = self.id;
        self.tape.push("narrow", Tensor::new(&shape, data)?, &[id], move |g, sink| {
            let slot = sink.slot(id);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                for (d, s) in slot[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                {
                    *d += s;
                }
            }
        })
    }
}

fn permuted_offsets(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let mut src = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        src.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= gather[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    src
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: base,
                rhs: s.to_vec(),
            });
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let ids_bw = ids.clone();
    tape.push("concat", Tensor::new(&shape, data)?, &ids, move |g, sink| {
        let mut offset = 0;
        for (&id, &e) in ids_bw.iter().zip(&extents) {
            if sink.wants(id) {
                let slot = sink.slot(id);
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                    for (d, s) in slot[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            offset += e;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn permute_matches_index_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        let yv = y.value();
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(yv.get(&[a, b, c]), x.value().get(&[b, c, a]));
                }
            }
        }
    }

    #[test]
    fn concat_and_narrow_invert() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        let g = tape.backward(back.sum_all().unwrap()).unwrap();
        assert!(g.get(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get(b).unwrap().iter().all(|&v| v == 1.0));
    }
}
