//! Token-grid operators. Tokens are stored row-major as `[B, H·W, C]`.

use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Fixed sparse linear map along the token axis, in CSR form.
/// Output token `o` is `Σ weight · input[index]` over row `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    n_in: usize,
    n_out: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(i, w) in row {
                assert!(i < n_in, "sparse map index {i} >= {n_in}");
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Self {
            n_in,
            n_out: rows.len(),
            offsets,
            index,
            weight,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn nnz(&self) -> usize {
        self.index.len()
    }

    pub fn row(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[o]..self.offsets[o + 1];
        self.index[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }

    /// Adaptive average pooling of an `h×w` grid to `gh×gw` cells. Cell
    /// boundaries are `floor(i·h/gh)`, so regions tile the grid exactly.
    pub fn adaptive_avg_pool(h: usize, w: usize, gh: usize, gw: usize) -> Result<Self> {
        if gh == 0 || gw == 0 || gh > h || gw > w {
            return Err(TensorError::Param {
                op: "adaptive_avg_pool",
                msg: format!("grid {gh}x{gw} must be within 1x1..={h}x{w}"),
            });
        }
        let mut rows = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            let (y0, y1) = (gy * h / gh, (gy + 1) * h / gh);
            for gx in 0..gw {
                let (x0, x1) = (gx * w / gw, (gx + 1) * w / gw);
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                let mut row = Vec::with_capacity((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        row.push((y * w + x, 1.0 / area));
                    }
                }
                rows.push(row);
            }
        }
        Ok(Self::from_rows(h * w, rows))
    }

    /// Bilinear resampling with half-pixel centres (corner alignment off);
    /// source coordinates below zero are clamped to the first sample.
    pub fn bilinear(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let axis = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut rows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let (y0, y1, fy) = axis(h, oh, oy);
            for ox in 0..ow {
                let (x0, x1, fx) = axis(w, ow, ox);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        match row.iter_mut().find(|(i, _)| *i == y * w + x) {
                            Some(e) => e.1 += wgt,
                            None => row.push((y * w + x, wgt)),
                        }
                    }
                }
                rows.push(row);
            }
        }
        Self::from_rows(h * w, rows)
    }

    /// Zero padding on the bottom/right from `h×w` to `ph×pw`.
    pub fn zero_pad(h: usize, w: usize, ph: usize, pw: usize) -> Self {
        assert!(ph >= h && pw >= w);
        let rows = (0..ph * pw)
            .map(|o| {
                let (y, x) = (o / pw, o % pw);
                if y < h && x < w {
                    vec![(y * w + x, 1.0)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self::from_rows(h * w, rows)
    }
}

fn grid_dims(op: &'static str, shape: &[usize], h: usize, w: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] != h * w {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected [B, {h}x{w}, C] tokens, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[2]))
}

impl<'t> Var<'t> {
    /// Applies a [`SparseMap`] along the token axis of `[B, N, C]`.
    pub fn token_map(self, map: &SparseMap) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[1] != map.n_in {
            return Err(TensorError::Shape {
                op: "token_map",
                lhs: s.to_vec(),
                rhs: vec![map.n_out, map.n_in],
            });
        }
        let (b, n_in, c) = (s[0], s[1], s[2]);
        let n_out = map.n_out;
        let mut out = vec![0.0; b * n_out * c];
        for bi in 0..b {
            for o in 0..n_out {
                let dst = &mut out[(bi * n_out + o) * c..(bi * n_out + o + 1) * c];
                for (i, wgt) in map.row(o) {
                    let src = &x.data()[(bi * n_in + i) * c..(bi * n_in + i + 1) * c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += wgt * v;
                    }
                }
            }
        }
        self.tape.add_macs((b * map.nnz() * c) as u64);
        let map = map.clone();
        let id = self.id;
        self.tape
            .push("token_map", Tensor::new(&[b, n_out, c], out)?, &[id], move |g, sink| {
                let slot = sink.slot(id);
                for bi in 0..b {
                    for o in 0..n_out {
                        let go = &g[(bi * n_out + o) * c..(bi * n_out + o + 1) * c];
                        for (i, wgt) in map.row(o) {
                            let dst = &mut slot[(bi * n_in + i) * c..(bi * n_in + i + 1) * c];
                            for (d, v) in dst.iter_mut().zip(go) {
                                *d += wgt * v;
                            }
                        }
                    }
                }
            })
    }

    /// Depthwise `k×k` convolution on an `h×w` token grid with zero padding
    /// preserving the extent. `kernel` is `[k·k, C]`, row-major over taps.
    pub fn depthwise_conv2d(self, kernel: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let kv = kernel.value();
        let (b, c) = grid_dims("depthwise_conv2d", x.shape(), h, w)?;
        let taps = kv.shape().first().copied().unwrap_or(0);
        let k = (taps as f64).sqrt() as usize;
        if kv.rank() != 2 || kv.shape()[1] != c || k * k != taps || k % 2 == 0 {
            return Err(TensorError::Shape {
                op: "depthwise_conv2d",
                lhs: x.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let r = (k / 2) as isize;
        let (hi, wi) = (h as isize, w as isize);
        // (output token, input token, tap) triples shared by every batch item
        let mut links = Vec::with_capacity(h * w * taps);
        for y in 0..hi {
            for xx in 0..wi {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, xx + dx);
                        if sy < 0 || sy >= hi || sx < 0 || sx >= wi {
                            continue;
                        }
                        let tap = ((dy + r) * k as isize + (dx + r)) as usize;
                        links.push(((y * wi + xx) as usize, (sy * wi + sx) as usize, tap));
                    }
                }
            }
        }
        let n = h * w;
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for &(o, i, t) in &links {
                let src = &x.data()[(bi * n + i) * c..(bi * n + i + 1) * c];
                let kr = &kv.data()[t * c..(t + 1) * c];
                let dst = &mut out[(bi * n + o) * c..(bi * n + o + 1) * c];
                for j in 0..c {
                    dst[j] += src[j] * kr[j];
                }
            }
        }
        self.tape.add_macs((b * links.len() * c) as u64);
        let (xid, kid) = (self.id, kernel.id);
        self.tape.push(
            "depthwise_conv2d",
            Tensor::new(x.shape(), out)?,
            &[xid, kid],
            move |g, sink| {
                if sink.wants(xid) {
                    let slot = sink.slot(xid);
                    for bi in 0..b {
                        for &(o, i, t) in &links {
                            let go = &g[(bi * n + o) * c..(bi * n + o + 1) * c];
                            let kr = &kv.data()[t * c..(t + 1) * c];
                            let dst = &mut slot[(bi * n + i) * c..(bi * n + i + 1) * c];
                            for j in 0..c {
                                dst[j] += go[j] * kr[j];
                            }
                        }
                    }
                }
                if sink.wants(kid) {
                    let slot = sink.slot(kid);
                    for bi in 0..b {
                        for &(o, i, t) in &links {
                            let go = &g[(bi * n + o) * c..(bi * n + o + 1) * c];
                            let src = &x.data()[(bi * n + i) * c..(bi * n + i + 1) * c];
                            let dst = &mut slot[t * c..(t + 1) * c];
                            for j in 0..c {
                                dst[j] += go[j] * src[j];
                            }
                        }
                    }
                }
            },
        )
    }

    /// Extracts `k×k` patches with the given stride and symmetric zero
    /// padding: `[B, h·w, C] -> [B, ho·wo, k·k·C]`, patch layout (ky, kx, c).
    pub fn im2col(self, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(Var<'t>, usize, usize)> {
        let x = self.value();
        let (b, c) = grid_dims("im2col", x.shape(), h, w)?;
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Param {
                op: "im2col",
                msg: format!("kernel {k}, stride {stride}, pad {pad} invalid for {h}x{w}"),
            });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let width = k * k * c;
        // For each (output token, tap): source token or None for padding.
        let mut src_of = Vec::with_capacity(ho * wo * k * k);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                        src_of.push(inside.then(|| sy as usize * w + sx as usize));
                    }
                }
            }
        }
        let (n_in, n_out) = (h * w, ho * wo);
        let mut out = vec![0.0; b * n_out * width];
        for bi in 0..b {
            for (slot_idx, src) in src_of.iter().enumerate() {
                if let Some(i) = src {
                    let dst = (bi * n_out * k * k + slot_idx) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[(bi * n_in + i) * c..(bi * n_in + i + 1) * c]);
                }
            }
        }
        let id = self.id;
        let var = self
            .tape
            .push("im2col", Tensor::new(&[b, n_out, width], out)?, &[id], move |g, sink| {
                let slot = sink.slot(id);
                for bi in 0..b {
                    for (slot_idx, src) in src_of.iter().enumerate() {
                        if let Some(i) = src {
                            let from = (bi * n_out * k * k + slot_idx) * c;
                            let dst = &mut slot[(bi * n_in + i) * c..(bi * n_in + i + 1) * c];
                            for (d, v) in dst.iter_mut().zip(&g[from..from + c]) {
                                *d += v;
                            }
                        }
                    }
                }
            })?;
        Ok((var, ho, wo))
    }
}
