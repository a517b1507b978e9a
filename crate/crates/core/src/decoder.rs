//! All-stage MLP decoder and the pixel-wise loss.

use fuseg_tensor::{concat, Reduction, Session, SparseMap, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};

/// Label value excluded from the loss and the metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Vec<Linear>,
    pub fuse: Linear,
    pub classify: Linear,
    pub num_classes: usize,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, widths: &[usize], embed_dim: usize, num_classes: usize) -> Result<Self> {
        let mut sc = init.scope("decoder");
        let embed = widths
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(&mut sc, &format!("embed{}", l + 1), c, embed_dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            fuse: Linear::new(&mut sc, "fuse", widths.len() * embed_dim, embed_dim)?,
            classify: Linear::new(&mut sc, "classify", embed_dim, num_classes)?,
            num_classes,
        })
    }

    /// `pyramid[l] = (tokens [B, h_l·w_l, C_l], h_l, w_l)`; returns logits
    /// `[B, H·W, L]` on the `out_h × out_w` grid.
    pub fn decode<'t>(&self, s: &Session<'t>, pyramid: &[(Var<'t>, usize, usize)], out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if pyramid.len() != self.embed.len() {
            return Err(Error::Input(format!(
                "decoder expects {} stages, got {}",
                self.embed.len(),
                pyramid.len()
            )));
        }
        let (_, h1, w1) = pyramid[0];
        let parts = pyramid
            .iter()
            .zip(&self.embed)
            .map(|(&(x, h, w), lin)| {
                let e = lin.forward(s, x)?;
                Ok(upsample(e, h, w, h1, w1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let y = self.fuse.forward(s, concat(&parts, 2)?)?.gelu()?;
        let logits = self.classify.forward(s, y)?;
        upsample(logits, h1, w1, out_h, out_w)
    }
}

/// Bilinear resize of a token grid (half-pixel centres, edge clamping).
pub fn upsample<'t>(x: Var<'t>, h: usize, w: usize, oh: usize, ow: usize) -> Result<Var<'t>> {
    if (h, w) == (oh, ow) {
        return Ok(x);
    }
    Ok(x.token_map(&SparseMap::bilinear(h, w, oh, ow))?)
}

/// Summed pixel-wise cross-entropy over non-ignored pixels; returns the loss
/// and the number of pixels that contributed.
pub fn cross_entropy_sum<'t>(logits: Var<'t>, labels: &[u8]) -> Result<(Var<'t>, usize)> {
    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    Ok((logits.cross_entropy(labels, Some(IGNORE_LABEL), Reduction::Sum)?, count))
}

/// Mean pixel-wise cross-entropy; zero when every pixel is ignored.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    Ok(logits.cross_entropy(labels, Some(IGNORE_LABEL), Reduction::Mean)?)
}

/// Logits `[B, H, W, L]` with per-pixel argmax labels.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub labels: Vec<Vec<u8>>,
}

impl SegmentationOutput {
    /// From decoder logits `[B, H·W, L]`.
    pub fn from_logits(logits: &Tensor, height: usize, width: usize) -> Result<Self> {
        let sh = logits.shape();
        let (b, n, l) = (sh[0], sh[1], sh[2]);
        if n != height * width {
            return Err(Error::Input(format!("{n} tokens cannot form a {height}x{width} grid")));
        }
        let labels = logits
            .data()
            .chunks(n * l)
            .map(|sample| sample.chunks(l).map(argmax).collect())
            .collect();
        Ok(Self {
            logits: logits.clone().reshape(&[b, height, width, l])?,
            labels,
        })
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}
