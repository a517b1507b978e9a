//! Per-stage fusion of the modality features into one representation.

use fuseg_tensor::{concat, ParamId, Session, Tensor, TensorError, Var};

use crate::config::{FusionConfig, ResidualMode};
use crate::encoder::StageFeature;
use crate::error::{Error, Result};
use crate::layers::{DepthwiseConv, Init, Linear, Mlp};

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub stage: usize,
    pub channels: usize,
    pub num_slots: usize,
    pub tau: f64,
    pub proj: Linear,
    pub branches: Vec<DepthwiseConv>,
    pub merge: Mlp,
    pub channel_gate: Mlp,
    pub residual: ResidualLogits,
}

/// Source of the modality residual logits.
#[derive(Debug, Clone)]
pub enum ResidualLogits {
    Static(ParamId),
    Conditioned(Mlp),
}

impl FusionBlock {
    pub fn new(init: &mut Init<'_>, cfg: &FusionConfig, stage: usize, channels: usize, num_slots: usize) -> Result<Self> {
        let c = channels;
        let squeeze = (c / cfg.squeeze_ratio).max(1);
        let mut sc = init.scope(&format!("fusion.stage{stage}"));
        let branches = cfg
            .kernel_sizes
            .iter()
            .map(|&k| DepthwiseConv::new(&mut sc, &format!("dw{k}"), k, c))
            .collect::<Result<_>>()?;
        let residual = match cfg.residual_mode {
            ResidualMode::Static => ResidualLogits::Static(sc.zeros("residual_logits", &[num_slots])?),
            ResidualMode::Conditioned => ResidualLogits::Conditioned(Mlp::new(&mut sc, "residual_head", c, squeeze, 1)?),
        };
        Ok(Self {
            stage,
            channels,
            num_slots,
            tau: cfg.tau,
            proj: Linear::new(&mut sc, "proj", num_slots * c, c)?,
            branches,
            merge: Mlp::new(&mut sc, "merge", c, c * cfg.merge_expansion, c)?,
            channel_gate: Mlp::new(&mut sc, "channel_gate", c, squeeze, c)?,
            residual,
        })
    }

    /// Concatenates all slots along channels (absent slots as zeros) and
    /// projects back to `C`.
    pub fn concat_project<'t>(&self, s: &Session<'t>, feats: &[StageFeature<'t>]) -> Result<Var<'t>> {
        let first = check_shapes(feats)?;
        let shape = first.tokens.shape();
        let mut parts = Vec::with_capacity(self.num_slots);
        for slot in 0..self.num_slots {
            match feats.iter().find(|f| f.modality == slot) {
                Some(f) => parts.push(f.tokens),
                None => parts.push(s.constant(Tensor::zeros(&shape))),
            }
        }
        self.proj.forward(s, concat(&parts, 2)?)
    }

    /// `r = x + merge(Σ_k dw_k(x))`, then a sigmoid channel gate from `gap(r)`.
    pub fn spatial_mix<'t>(&self, s: &Session<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for br in &self.branches {
            let y = br.forward(s, x, h, w)?;
            acc = Some(match acc {
                Some(a) => a.add(y)?,
                None => y,
            });
        }
        let r = match acc {
            Some(a) => x.add(self.merge.forward(s, a)?)?,
            None => x,
        };
        let b = r.shape()[0];
        let gate = self.channel_gate.forward(s, r.gap()?)?.sigmoid()?;
        Ok(r.mul(gate.reshape(&[b, 1, self.channels])?)?)
    }

    /// Residual logits of the present modalities, `[B, m]` or `[m]`.
    pub fn residual_logits<'t>(&self, s: &Session<'t>, feats: &[StageFeature<'t>]) -> Result<Var<'t>> {
        match &self.residual {
            ResidualLogits::Static(g) => {
                let g = s.param(*g);
                let parts = feats.iter().map(|f| Ok(g.narrow(0, f.modality, 1)?)).collect::<Result<Vec<_>>>()?;
                Ok(concat(&parts, 0)?)
            }
            ResidualLogits::Conditioned(mlp) => {
                let parts = feats
                    .iter()
                    .map(|f| mlp.forward(s, f.tokens.gap()?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(concat(&parts, 1)?)
            }
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, feats: &[StageFeature<'t>]) -> Result<FusionOutput<'t>> {
        let first = check_shapes(feats)?;
        let mixed = self.spatial_mix(s, self.concat_project(s, feats)?, first.height, first.width)?;
        let logits = self.residual_logits(s, feats)?;
        let (fused, weights) = modality_residual(mixed, feats, logits, self.tau)?;
        Ok(FusionOutput { fused, weights })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput<'t> {
    pub fused: Var<'t>,
    /// Residual weights over the present modalities, `[m]` or `[B, m]`.
    pub weights: Var<'t>,
}

fn check_shapes<'a, 't>(feats: &'a [StageFeature<'t>]) -> Result<&'a StageFeature<'t>> {
    let first = feats.first().ok_or_else(|| Error::Input("fusion needs at least one modality".into()))?;
    let shape = first.tokens.shape();
    for f in feats {
        if f.tokens.shape() != shape {
            return Err(TensorError::Shape {
                op: "fusion",
                lhs: shape,
                rhs: f.tokens.shape(),
            }
            .into());
        }
    }
    Ok(first)
}

/// `F = F̂ + Σ_i ω_i Z̃_i` with `ω = softmax(γ / τ)` over the present
/// modalities. `logits` is `[m]` (shared by the batch) or `[B, m]`.
pub fn modality_residual<'t>(mixed: Var<'t>, feats: &[StageFeature<'t>], logits: Var<'t>, tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("fusion temperature must be positive, got {tau}")));
    }
    let axis = logits.shape().len() - 1;
    let omega = logits.softmax(axis, tau)?;
    let mut out = mixed;
    for (i, f) in feats.iter().enumerate() {
        let w = omega.narrow(axis, i, 1)?;
        let w = if axis == 0 { w } else { w.reshape(&[w.shape()[0], 1, 1])? };
        out = out.add(f.tokens.mul(w)?)?;
    }
    Ok((out, omega))
}

/// Fusion used when the fusion module is disabled: the plain mean.
pub fn mean_fusion<'t>(feats: &[StageFeature<'t>]) -> Result<Var<'t>> {
    check_shapes(feats)?;
    let mut acc = feats[0].tokens;
    for f in &feats[1..] {
        acc = acc.add(f.tokens)?;
    }
    if feats.len() == 1 {
        return Ok(acc);
    }
    Ok(acc.scale(1.0 / feats.len() as f64)?)
}
