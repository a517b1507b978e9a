//! Cross-modal interaction block.
//!
//! Wraps one encoder block so that, between self-attention and the
//! feed-forward refinement, every modality receives reliability-filtered,
//! consistency-gated messages from the others.

use std::collections::HashMap;
use std::rc::Rc;

use fuseg_tensor::{concat, stats, Session, SparseMap, Tensor, TensorError, Var};

use crate::attention::multi_head_attention;
use crate::config::{InteractionConfig, PairParams};
use crate::encoder::{EncoderStage, StageFeature};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Mlp};

/// Per-modality reliability estimate. `weight` and `coverage` are `[B, 1]`,
/// `scores`, `mask` are `[B, N]`, `threshold` is `[B, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ReliabilityState<'t> {
    pub modality: usize,
    pub descriptor: Var<'t>,
    pub weight: Var<'t>,
    pub coverage: Var<'t>,
    pub scores: Var<'t>,
    pub threshold: Var<'t>,
    pub mask: Var<'t>,
}

/// Message from modality `source` to modality `target`.
#[derive(Debug, Clone)]
pub struct CrossMessage<'t> {
    pub target: usize,
    pub source: usize,
    pub per_scale: Vec<Var<'t>>,
    pub attention: Vec<Rc<Tensor>>,
    /// Scale coefficients, `[S_g]`.
    pub alpha: Var<'t>,
    pub aggregate: Var<'t>,
    /// `[B, N, 1]`.
    pub gate: Var<'t>,
    pub gated: Var<'t>,
    /// Mixer weight of this message, `[B, N, 1]`.
    pub mix: Var<'t>,
    /// Weight of this source in the affine refinement, `[B, N, 1]`.
    pub sca_mix: Var<'t>,
}

#[derive(Debug, Clone, Default)]
pub struct InteractionTrace<'t> {
    pub reliability: Vec<ReliabilityState<'t>>,
    pub calibrated: Vec<Var<'t>>,
    pub messages: Vec<CrossMessage<'t>>,
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Log of the per-head Gaussian width.
    pub log_sigma: fuseg_tensor::ParamId,
    pub heads: usize,
}

impl CrossAttention {
    fn new(init: &mut Init<'_>, name: &str, c: usize, heads: usize, sigma: f64) -> Result<Self> {
        let mut sc = init.scope(name);
        Ok(Self {
            q: Linear::new(&mut sc, "q", c, c)?,
            k: Linear::new(&mut sc, "k", c, c)?,
            v: Linear::new(&mut sc, "v", c, c)?,
            o: Linear::new(&mut sc, "o", c, c)?,
            log_sigma: sc.full("log_sigma", &[heads], sigma.ln())?,
            heads,
        })
    }

    /// Gaussian logit bias `-d² / (2σ²)`, shape `[heads, N, G]`.
    pub fn bias<'t>(&self, s: &Session<'t>, dist2: &Tensor) -> Result<Var<'t>> {
        let inv = s
            .param(self.log_sigma)
            .scale(-2.0)?
            .exp()?
            .scale(-0.5)?
            .reshape(&[self.heads, 1, 1])?;
        let (n, g) = (dist2.shape()[0], dist2.shape()[1]);
        let d = s.constant(dist2.clone().reshape(&[1, n, g])?);
        Ok(d.mul(inv)?)
    }

    /// Attends projected queries over projected source keys and values,
    /// then applies the output projection.
    pub fn attend<'t>(
        &self,
        s: &Session<'t>,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        bias: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Rc<Tensor>)> {
        let (y, attn) = multi_head_attention(q, k, v, self.heads, bias)?;
        Ok((self.o.forward(s, y)?, attn))
    }
}

/// Token-wise softmax weights over source modalities.
#[derive(Debug, Clone)]
pub struct TokenMixer {
    pub q: Linear,
    pub k: Linear,
}

impl TokenMixer {
    fn new(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        let mut sc = init.scope(name);
        let d = (c / 2).max(1);
        Ok(Self {
            q: Linear::new(&mut sc, "q", c, d)?,
            k: Linear::new(&mut sc, "k", c, d)?,
        })
    }

    /// `target: [B, N, C]`, `sources`: pooled descriptors `[B, C]`.
    /// Returns one `[B, N, 1]` weight per source, summing to 1 per token.
    pub fn weights<'t>(&self, s: &Session<'t>, target: Var<'t>, sources: &[Var<'t>], tau: f64) -> Result<Vec<Var<'t>>> {
        let q = self.q.forward(s, target)?;
        let logits = sources
            .iter()
            .map(|&g| {
                let k = self.k.forward(s, g)?;
                let kd = k.shape()[1];
                Ok(q.matmul(k.reshape(&[k.shape()[0], kd, 1])?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let pi = concat(&logits, 2)?.softmax(2, tau)?;
        (0..sources.len()).map(|j| Ok(pi.narrow(2, j, 1)?)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InteractionBlock {
    pub stage: usize,
    pub channels: usize,
    pub num_slots: usize,
    pub config: InteractionConfig,
    pub weight_head: Mlp,
    pub coverage_head: Mlp,
    pub scorer: Mlp,
    pub calib: fuseg_tensor::ParamId,
    /// One entry when tied, otherwise indexed by [`Self::pair_index`].
    pub cross: Vec<CrossAttention>,
    /// Scale logits per source slot (one shared entry when tied).
    pub scale_logits: Vec<fuseg_tensor::ParamId>,
    pub sca: Vec<Mlp>,
    pub mixer: TokenMixer,
    pub sca_mixer: TokenMixer,
    pub sca_coeff: fuseg_tensor::ParamId,
}

impl InteractionBlock {
    pub fn new(init: &mut Init<'_>, cfg: &InteractionConfig, stage: usize, channels: usize, heads: usize, num_slots: usize) -> Result<Self> {
        let c = channels;
        let hidden = (c / 2).max(1);
        let mut sc = init.scope(&format!("interaction.stage{stage}"));
        let tied = cfg.pair_params == PairParams::Tied;
        let pairs = if tied { 1 } else { num_slots * num_slots.saturating_sub(1) };
        let sources = if tied { 1 } else { num_slots };
        let mut cross = Vec::with_capacity(pairs);
        let mut sca = Vec::with_capacity(pairs);
        for p in 0..pairs {
            let name = if tied { String::new() } else { format!("pair{p}.") };
            cross.push(CrossAttention::new(&mut sc, &format!("{name}cross"), c, heads, cfg.sigma_init)?);
            sca.push(Mlp::new(&mut sc, &format!("{name}sca"), c, hidden, 2 * c)?);
        }
        let scale_logits = (0..sources)
            .map(|j| {
                let name = if tied { "scale_logits".to_string() } else { format!("source{j}.scale_logits") };
                sc.zeros(&name, &[cfg.grid_scales])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stage,
            channels,
            num_slots,
            config: cfg.clone(),
            weight_head: Mlp::new(&mut sc, "weight_head", c, hidden, 1)?,
            coverage_head: Mlp::new(&mut sc, "coverage_head", c, hidden, 1)?,
            scorer: Mlp::new(&mut sc, "scorer", c, hidden, 1)?,
            calib: sc.full("calib", &[c], 1.0)?,
            cross,
            scale_logits,
            sca,
            mixer: TokenMixer::new(&mut sc, "mixer", c)?,
            sca_mixer: TokenMixer::new(&mut sc, "sca_mixer", c)?,
            sca_coeff: sc.full("sca_coeff", &[1], cfg.sca_init)?,
        })
    }

    fn tied(&self) -> bool {
        self.config.pair_params == PairParams::Tied
    }

    /// Parameter index for the ordered pair `target ← source` (slot ids).
    pub fn pair_index(&self, target: usize, source: usize) -> usize {
        if self.tied() {
            0
        } else {
            target * (self.num_slots - 1) + if source < target { source } else { source - 1 }
        }
    }

    fn source_index(&self, source: usize) -> usize {
        if self.tied() {
            0
        } else {
            source
        }
    }

    /// Pooled grids used for cross-attention keys at an `h×w` stage.
    pub fn grids(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.config.grid_scales)
            .map(|sx| {
                let f = 1usize << sx;
                (h.div_ceil(f), w.div_ceil(f))
            })
            .collect()
    }

    /// Modality weights (softmax across modalities), coverage ratios and
    /// pooled descriptors. Returns `(descriptor, weight, coverage)` per input.
    pub fn estimate_reliability<'t>(&self, s: &Session<'t>, zhat: &[Var<'t>]) -> Result<Vec<(Var<'t>, Var<'t>, Var<'t>)>> {
        let g: Vec<Var<'t>> = zhat.iter().map(|z| Ok(z.gap()?)).collect::<Result<_>>()?;
        let logits = g.iter().map(|&gi| self.weight_head.forward(s, gi)).collect::<Result<Vec<_>>>()?;
        let w = concat(&logits, 1)?.softmax(1, self.config.tau_m)?;
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                let p = self.coverage_head.forward(s, gi)?.sigmoid()?;
                Ok((gi, w.narrow(1, i, 1)?, p))
            })
            .collect()
    }

    /// Per-token informativeness in (0, 1), `[B, N]`.
    pub fn token_scores<'t>(&self, s: &Session<'t>, zhat: Var<'t>) -> Result<Var<'t>> {
        let sh = zhat.shape();
        Ok(self.scorer.forward(s, zhat)?.sigmoid()?.reshape(&[sh[0], sh[1]])?)
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        stage: &EncoderStage,
        z: &[StageFeature<'t>],
    ) -> Result<(Vec<StageFeature<'t>>, InteractionTrace<'t>)> {
        let first = z.first().ok_or_else(|| Error::Input("interaction needs at least one modality".into()))?;
        let shape = first.tokens.shape();
        for f in z {
            if f.tokens.shape() != shape || (f.height, f.width) != (first.height, first.width) {
                return Err(TensorError::Shape {
                    op: "interaction",
                    lhs: shape,
                    rhs: f.tokens.shape(),
                }
                .into());
            }
        }
        let (h, w) = (first.height, first.width);
        let zhat: Vec<Var<'t>> = z
            .iter()
            .map(|f| stage.attn.forward(s, f.tokens, h, w))
            .collect::<Result<_>>()?;
        let mut trace = InteractionTrace::default();
        if z.len() == 1 {
            let u = stage.ffn.forward(s, zhat[0], h, w)?;
            return Ok((vec![first.with_tokens(u)], trace));
        }
        let cfg = &self.config;

        let rel = self.estimate_reliability(s, &zhat)?;
        let calib = s.param(self.calib);
        let mut zbreve = Vec::with_capacity(z.len());
        for (i, &(g, wgt, p)) in rel.iter().enumerate() {
            let scores = self.token_scores(s, zhat[i])?;
            let (threshold, mask) = soft_topp_mask(s, scores, p, cfg.tau_a)?;
            zbreve.push(calibrate_source(zhat[i], calib, mask, wgt)?);
            trace.reliability.push(ReliabilityState {
                modality: z[i].modality,
                descriptor: g,
                weight: wgt,
                coverage: p,
                scores,
                threshold,
                mask,
            });
        }
        let source_desc: Vec<Var<'t>> = zbreve.iter().map(|v| Ok(v.gap()?)).collect::<Result<_>>()?;
        trace.calibrated = zbreve.clone();

        let grids = self.grids(h, w);
        let dist: Vec<Tensor> = grids.iter().map(|&(gh, gw)| grid_sq_distance(h, w, gh, gw)).collect();
        let pooled: Vec<Vec<Var<'t>>> = zbreve
            .iter()
            .map(|&zb| grids.iter().map(|&(gh, gw)| pool_to_grid(zb, h, w, gh, gw)).collect())
            .collect::<Result<_>>()?;

        // Projections are cached per parameter set so that the tied mode
        // computes each query and key/value set only once.
        let mut q_cache: HashMap<(usize, usize), Var<'t>> = HashMap::new();
        let mut kv_cache: HashMap<(usize, usize, usize), (Var<'t>, Var<'t>)> = HashMap::new();
        let mut bias_cache: HashMap<(usize, usize), Var<'t>> = HashMap::new();

        let mut out = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let ti = z[i].modality;
            let others: Vec<usize> = (0..z.len()).filter(|&j| j != i).collect();
            let mut gated = Vec::with_capacity(others.len());
            let mut partial = Vec::with_capacity(others.len());
            for &j in &others {
                let sj = z[j].modality;
                let pi = self.pair_index(ti, sj);
                let ca = &self.cross[pi];
                let q = match q_cache.get(&(pi, i)) {
                    Some(&q) => q,
                    None => {
                        let q = ca.q.forward(s, zhat[i])?;
                        q_cache.insert((pi, i), q);
                        q
                    }
                };
                let mut ys = Vec::with_capacity(grids.len());
                let mut attns = Vec::with_capacity(grids.len());
                for sx in 0..grids.len() {
                    let (k, v) = match kv_cache.get(&(pi, j, sx)) {
                        Some(&kv) => kv,
                        None => {
                            let kv = (ca.k.forward(s, pooled[j][sx])?, ca.v.forward(s, pooled[j][sx])?);
                            kv_cache.insert((pi, j, sx), kv);
                            kv
                        }
                    };
                    let bias = match bias_cache.get(&(pi, sx)) {
                        Some(&b) => b,
                        None => {
                            let b = ca.bias(s, &dist[sx])?;
                            bias_cache.insert((pi, sx), b);
                            b
                        }
                    };
                    let (y, a) = ca.attend(s, q, k, v, Some(bias))?;
                    ys.push(y);
                    attns.push(a);
                }
                let alpha = s.param(self.scale_logits[self.source_index(sj)]).softmax(0, 1.0)?;
                let ybar = aggregate_scales(&ys, alpha)?;
                let (yt, gate) = consistency_filter(zhat[i], ybar, cfg.kappa)?;
                gated.push(yt);
                partial.push(CrossMessage {
                    target: ti,
                    source: sj,
                    per_scale: ys,
                    attention: attns,
                    alpha,
                    aggregate: ybar,
                    gate,
                    gated: yt,
                    mix: yt,
                    sca_mix: yt,
                });
            }
            let descs: Vec<Var<'t>> = others.iter().map(|&j| source_desc[j]).collect();
            let pi_mix = self.mixer.weights(s, zhat[i], &descs, cfg.tau_mix)?;
            let x = mix_messages(zhat[i], &pi_mix, &gated)?;
            let u = stage.ffn.forward(s, x, h, w)?;

            let pi_sca = self.sca_mixer.weights(s, zhat[i], &descs, cfg.tau_mix)?;
            let mut sca_sum: Option<Var<'t>> = None;
            for (n, &j) in others.iter().enumerate() {
                let mlp = &self.sca[self.pair_index(ti, z[j].modality)];
                let term = source_affine(s, mlp, u, rel[j].0)?.mul(pi_sca[n])?;
                sca_sum = Some(match sca_sum {
                    Some(acc) => acc.add(term)?,
                    None => term,
                });
            }
            let lambda = s.param(self.sca_coeff);
            let zt = u.add(sca_sum.expect("at least one source").mul(lambda)?)?;
            for (n, mut m) in partial.into_iter().enumerate() {
                m.mix = pi_mix[n];
                m.sca_mix = pi_sca[n];
                trace.messages.push(m);
            }
            out.push(z[i].with_tokens(zt));
        }
        Ok((out, trace))
    }
}

/// Soft top-p mask over token scores `[B, N]` with coverage `p: [B, 1]`.
///
/// The threshold is the per-sample `p`-quantile of the scores and carries no
/// gradient. Returns `(threshold [B, 1], mask [B, N])`.
pub fn soft_topp_mask<'t>(s: &Session<'t>, scores: Var<'t>, coverage: Var<'t>, tau_a: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(tau_a > 0.0) {
        return Err(Error::Config(format!("mask temperature must be positive, got {tau_a}")));
    }
    let p = coverage.value();
    let theta = stats::quantile_rows(&scores.value(), p.data())?;
    let theta = s.tape().detached(theta)?;
    let mask = scores.sub(theta)?.scale(1.0 / tau_a)?.sigmoid()?;
    Ok((theta, mask))
}

/// `Ẑ ⊙ calib ⊙ a ⊙ w` with `calib: [C]`, `a: [B, N]`, `w: [B, 1]`.
pub fn calibrate_source<'t>(zhat: Var<'t>, calib: Var<'t>, mask: Var<'t>, weight: Var<'t>) -> Result<Var<'t>> {
    let sh = zhat.shape();
    let a = mask.reshape(&[sh[0], sh[1], 1])?;
    let w = weight.reshape(&[sh[0], 1, 1])?;
    Ok(zhat.mul(calib)?.mul(a)?.mul(w)?)
}

/// Adaptive average pooling of an `h×w` token grid to `gh×gw` cells.
pub fn pool_to_grid<'t>(z: Var<'t>, h: usize, w: usize, gh: usize, gw: usize) -> Result<Var<'t>> {
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::Config(format!("grid {gh}x{gw} does not fit a {h}x{w} feature map")));
    }
    if (gh, gw) == (h, w) {
        return Ok(z);
    }
    Ok(z.token_map(&SparseMap::adaptive_avg_pool(h, w, gh, gw)?)?)
}

/// Cell-centre coordinate of index `i` on an axis with `n` cells, in [0, 1].
fn centre(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Squared distances `[h·w, gh·gw]` between query cells and source cells,
/// both grids normalised to the unit square.
pub fn grid_sq_distance(h: usize, w: usize, gh: usize, gw: usize) -> Tensor {
    Tensor::from_fn(&[h * w, gh * gw], |idx| {
        let (q, k) = (idx / (gh * gw), idx % (gh * gw));
        let dy = centre(q / w, h) - centre(k / gw, gh);
        let dx = centre(q % w, w) - centre(k % gw, gw);
        dy * dy + dx * dx
    })
}

/// `Σ_s α_s Y_s` with `alpha: [S]`.
pub fn aggregate_scales<'t>(ys: &[Var<'t>], alpha: Var<'t>) -> Result<Var<'t>> {
    if ys.len() != alpha.shape()[0] {
        return Err(Error::Config(format!("{} scales but {} coefficients", ys.len(), alpha.shape()[0])));
    }
    if ys.len() == 1 {
        return Ok(ys[0]);
    }
    let mut acc = ys[0].mul(alpha.narrow(0, 0, 1)?)?;
    for (sx, &y) in ys.iter().enumerate().skip(1) {
        acc = acc.add(y.mul(alpha.narrow(0, sx, 1)?)?)?;
    }
    Ok(acc)
}

/// Gates a message by its cosine agreement with the target tokens.
/// Returns `(gated message, gate [B, N, 1])`.
pub fn consistency_filter<'t>(zhat: Var<'t>, ybar: Var<'t>, kappa: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("gate sharpness must be positive, got {kappa}")));
    }
    let gate = zhat.cosine_sim(ybar)?.scale(kappa)?.sigmoid()?;
    Ok((ybar.mul(gate)?, gate))
}

/// `Ẑ + Σ_j Π_j ⊙ Ỹ_j`.
pub fn mix_messages<'t>(zhat: Var<'t>, weights: &[Var<'t>], messages: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (&p, &m) in weights.iter().zip(messages) {
        let term = m.mul(p)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(match acc {
        Some(d) => zhat.add(d)?,
        None => zhat,
    })
}

/// `scale ⊙ U + shift`, with both predicted from a source descriptor `[B, C]`.
pub fn source_affine<'t>(s: &Session<'t>, mlp: &Mlp, u: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
    let sh = u.shape();
    let (b, c) = (sh[0], sh[2]);
    let ss = mlp.forward(s, descriptor)?;
    let scale = ss.narrow(1, 0, c)?.reshape(&[b, 1, c])?;
    let shift = ss.narrow(1, c, c)?.reshape(&[b, 1, c])?;
    Ok(u.mul(scale)?.add(shift)?)
}
