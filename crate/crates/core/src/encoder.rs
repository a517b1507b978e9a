//! Hierarchical transformer encoder shared by all modalities.
//!
//! Every modality runs through the same stage weights; only a pointwise
//! input adapter, keyed by modality slot, differs.

use fuseg_tensor::{Session, SparseMap, Tensor, Var};

use crate::attention::multi_head_attention;
use crate::config::{EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{DepthwiseConv, Init, LayerNorm, Linear};

/// Image planes in row-major `H×W×C` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }
}

/// One sample's modality images, indexed by configured modality slot.
/// Absent modalities are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub slots: Vec<Option<Raster>>,
}

impl ModalityBundle {
    pub fn new(slots: Vec<Option<Raster>>) -> Self {
        Self { slots }
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| self.slots[i].is_some()).collect()
    }

    /// Spatial extent shared by every present modality.
    pub fn extent(&self) -> Option<(usize, usize)> {
        self.slots.iter().flatten().map(|r| (r.height, r.width)).next()
    }

    /// Copy with every slot outside `keep` removed.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .enumerate()
                .map(|(i, r)| if keep.contains(&i) { r.clone() } else { None })
                .collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(usize, usize)> {
        if self.slots.len() != config.num_modalities() {
            return Err(Error::Input(format!(
                "bundle has {} slots, model expects {}",
                self.slots.len(),
                config.num_modalities()
            )));
        }
        let (h, w) = self
            .extent()
            .ok_or_else(|| Error::Input("bundle has no present modality".into()))?;
        if h == 0 || w == 0 {
            return Err(Error::Input("empty image".into()));
        }
        for (i, r) in self.slots.iter().enumerate() {
            let Some(r) = r else { continue };
            let spec = &config.modalities[i];
            if (r.height, r.width) != (h, w) {
                return Err(Error::Input(format!(
                    "modality `{}` is {}x{}, expected {h}x{w}",
                    spec.name, r.height, r.width
                )));
            }
            if r.channels != spec.channels {
                return Err(Error::Input(format!(
                    "modality `{}` has {} channels, expected {}",
                    spec.name, r.channels, spec.channels
                )));
            }
            if r.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("modality `{}` contains non-finite values", spec.name)));
            }
        }
        Ok((h, w))
    }
}

/// Tokens of one modality at one stage, `[B, H·W, C]`.
#[derive(Debug, Clone, Copy)]
pub struct StageFeature<'t> {
    pub tokens: Var<'t>,
    pub height: usize,
    pub width: usize,
    /// Modality slot the tokens came from.
    pub modality: usize,
}

impl<'t> StageFeature<'t> {
    pub fn with_tokens(&self, tokens: Var<'t>) -> Self {
        Self { tokens, ..*self }
    }

    pub fn channels(&self) -> usize {
        *self.tokens.shape().last().expect("rank 3")
    }
}

/// Overlapping strided patch projection followed by LayerNorm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, in_ch: usize, out_ch: usize, stride: usize, eps: f64) -> Result<Self> {
        let kernel = EncoderConfig::patch_kernel(stride);
        let mut sc = init.scope("embed");
        Ok(Self {
            proj: Linear::new(&mut sc, "proj", kernel * kernel * in_ch, out_ch)?,
            norm: LayerNorm::new(&mut sc, "norm", out_ch, eps)?,
            kernel,
            stride,
        })
    }

    /// Output extent for an `h×w` input: inputs are zero-padded up to a
    /// multiple of the stride, so this is `ceil(h/s) × ceil(w/s)`.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, h: usize, w: usize) -> Result<(Var<'t>, usize, usize)> {
        let st = self.stride;
        let (ph, pw) = (h.div_ceil(st) * st, w.div_ceil(st) * st);
        let x = if (ph, pw) != (h, w) {
            x.token_map(&SparseMap::zero_pad(h, w, ph, pw))?
        } else {
            x
        };
        let (cols, ho, wo) = x.im2col(ph, pw, self.kernel, st, (self.kernel - 1) / 2)?;
        let y = self.norm.forward(s, self.proj.forward(s, cols)?)?;
        Ok((y, ho, wo))
    }
}

/// Self-attention whose keys and values come from an average-pooled copy of
/// the token grid, reduced by `sr` along each axis.
#[derive(Debug, Clone)]
pub struct EfficientSelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub sr: usize,
}

impl EfficientSelfAttention {
    pub fn new(init: &mut Init<'_>, c: usize, heads: usize, sr: usize, eps: f64) -> Result<Self> {
        let mut sc = init.scope("attn");
        Ok(Self {
            norm: LayerNorm::new(&mut sc, "norm", c, eps)?,
            q: Linear::new(&mut sc, "q", c, c)?,
            k: Linear::new(&mut sc, "k", c, c)?,
            v: Linear::new(&mut sc, "v", c, c)?,
            o: Linear::new(&mut sc, "o", c, c)?,
            heads,
            sr,
        })
    }

    /// Residual update `z + attention(LN(z))`.
    pub fn forward<'t>(&self, s: &Session<'t>, z: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.norm.forward(s, z)?;
        let kv = if self.sr > 1 {
            x.token_map(&SparseMap::adaptive_avg_pool(h, w, h.div_ceil(self.sr), w.div_ceil(self.sr))?)?
        } else {
            x
        };
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, kv)?;
        let v = self.v.forward(s, kv)?;
        let (att, _) = multi_head_attention(q, k, v, self.heads, None)?;
        Ok(z.add(self.o.forward(s, att)?)?)
    }
}

/// Feed-forward block with a depthwise 3×3 convolution between the two
/// pointwise layers.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub dw: DepthwiseConv,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(init: &mut Init<'_>, c: usize, expansion: usize, eps: f64) -> Result<Self> {
        let mut sc = init.scope("ffn");
        let hidden = c * expansion;
        Ok(Self {
            norm: LayerNorm::new(&mut sc, "norm", c, eps)?,
            fc1: Linear::new(&mut sc, "fc1", c, hidden)?,
            dw: DepthwiseConv::new(&mut sc, "dw", 3, hidden)?,
            fc2: Linear::new(&mut sc, "fc2", hidden, c)?,
        })
    }

    /// Residual update `x + FC2(GELU(DW(FC1(LN(x)))))`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let y = self.fc1.forward(s, self.norm.forward(s, x)?)?;
        let y = self.dw.forward(s, y, h, w)?.gelu()?;
        Ok(x.add(self.fc2.forward(s, y)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    /// 1-based stage number.
    pub index: usize,
    pub channels: usize,
    pub heads: usize,
    pub embed: PatchEmbed,
    pub attn: EfficientSelfAttention,
    pub ffn: MixFfn,
    pub norm: LayerNorm,
}

impl EncoderStage {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig, index: usize, in_ch: usize) -> Result<Self> {
        let l = index - 1;
        let c = cfg.widths[l];
        let mut sc = init.scope(&format!("encoder.stage{index}"));
        Ok(Self {
            index,
            channels: c,
            heads: cfg.heads[l],
            embed: PatchEmbed::new(&mut sc, in_ch, c, cfg.strides[l], cfg.ln_eps)?,
            attn: EfficientSelfAttention::new(&mut sc, c, cfg.heads[l], cfg.sr_ratios[l], cfg.ln_eps)?,
            ffn: MixFfn::new(&mut sc, c, cfg.ffn_expansion, cfg.ln_eps)?,
            norm: LayerNorm::new(&mut sc, "norm", c, cfg.ln_eps)?,
        })
    }

    /// Patch-embeds the previous stage's output for one modality.
    pub fn embed<'t>(&self, s: &Session<'t>, prev: &StageFeature<'t>) -> Result<StageFeature<'t>> {
        let (tokens, height, width) = self.embed.forward(s, prev.tokens, prev.height, prev.width)?;
        Ok(StageFeature {
            tokens,
            height,
            width,
            modality: prev.modality,
        })
    }

    /// Self-attention then feed-forward, without any cross-modal exchange.
    pub fn plain_block<'t>(&self, s: &Session<'t>, z: &StageFeature<'t>) -> Result<StageFeature<'t>> {
        let a = self.attn.forward(s, z.tokens, z.height, z.width)?;
        Ok(z.with_tokens(self.ffn.forward(s, a, z.height, z.width)?))
    }

    pub fn finish<'t>(&self, s: &Session<'t>, z: &StageFeature<'t>) -> Result<StageFeature<'t>> {
        Ok(z.with_tokens(self.norm.forward(s, z.tokens)?))
    }
}

/// Pointwise map from a modality's channels to the shared stem width.
#[derive(Debug, Clone)]
pub struct InputAdapter {
    pub proj: Linear,
}

impl InputAdapter {
    /// The initial weights depend only on `(channels, stem)`: stem channel `k`
    /// averages the input channels congruent to it, or repeats channel
    /// `k mod channels` when the input is narrower than the stem.
    pub fn new(init: &mut Init<'_>, slot: usize, channels: usize, stem: usize) -> Result<Self> {
        let mut w = Tensor::zeros(&[channels, stem]);
        for k in 0..stem {
            let rows: Vec<usize> = if channels >= stem {
                (0..channels).filter(|c| c % stem == k).collect()
            } else {
                vec![k % channels]
            };
            for &c in &rows {
                w.data_mut()[c * stem + k] = 1.0 / rows.len() as f64;
            }
        }
        let mut sc = init.scope("encoder");
        Ok(Self {
            proj: Linear::from_weight(&mut sc, &format!("adapter{slot}"), w, true)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub adapters: Vec<InputAdapter>,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, config: &ModelConfig) -> Result<Self> {
        let cfg = &config.encoder;
        let adapters = config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| InputAdapter::new(init, i, m.channels, cfg.stem_channels))
            .collect::<Result<_>>()?;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut in_ch = cfg.stem_channels;
        for index in 1..=cfg.num_stages() {
            stages.push(EncoderStage::new(init, cfg, index, in_ch)?);
            in_ch = cfg.widths[index - 1];
        }
        Ok(Self { adapters, stages })
    }

    /// Stacks slot `modality` of every bundle into `[B, H·W, C]` and applies
    /// its adapter. Every bundle must carry that modality.
    pub fn stem<'t>(&self, s: &Session<'t>, batch: &[&ModalityBundle], modality: usize) -> Result<StageFeature<'t>> {
        let first = batch
            .first()
            .and_then(|b| b.slots[modality].as_ref())
            .ok_or_else(|| Error::Input(format!("modality slot {modality} missing")))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(batch.len() * h * w * c);
        for b in batch {
            let r = b.slots[modality]
                .as_ref()
                .ok_or_else(|| Error::Input(format!("modality slot {modality} missing")))?;
            if (r.height, r.width, r.channels) != (h, w, c) {
                return Err(Error::Input("batch rasters differ in shape".into()));
            }
            data.extend_from_slice(&r.data);
        }
        let x = s.constant(Tensor::new(&[batch.len(), h * w, c], data)?);
        Ok(StageFeature {
            tokens: self.adapters[modality].proj.forward(s, x)?,
            height: h,
            width: w,
            modality,
        })
    }

    /// Runs every stage independently per modality.
    pub fn encode_plain<'t>(&self, s: &Session<'t>, batch: &[&ModalityBundle], present: &[usize]) -> Result<Vec<Vec<StageFeature<'t>>>> {
        let mut cur: Vec<StageFeature<'t>> = present.iter().map(|&i| self.stem(s, batch, i)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = cur
                .iter()
                .map(|f| {
                    let z = stage.embed(s, f)?;
                    let z = stage.plain_block(s, &z)?;
                    stage.finish(s, &z)
                })
                .collect::<Result<_>>()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}
