//! The full segmentation network: shared encoder with optional interaction
//! blocks, per-stage fusion, and the all-stage decoder.

use fuseg_tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Rng, Session, Tape, Var};

use crate::config::ModelConfig;
use crate::decoder::{cross_entropy_sum, Decoder, SegmentationOutput};
use crate::encoder::{Encoder, ModalityBundle, Raster, StageFeature};
use crate::error::{Error, Result};
use crate::fusion::{mean_fusion, FusionBlock};
use crate::interaction::{InteractionBlock, InteractionTrace};
use crate::layers::Init;

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Indexed by stage; `None` where the stage runs plain blocks.
    pub interaction: Vec<Option<InteractionBlock>>,
    /// Indexed by stage; `None` means mean fusion.
    pub fusion: Vec<Option<FusionBlock>>,
    pub decoder: Decoder,
}

/// Intermediate results of one forward pass.
pub struct ForwardOutput<'t> {
    /// `[B, H·W, L]`.
    pub logits: Var<'t>,
    pub height: usize,
    pub width: usize,
    pub present: Vec<usize>,
    /// Post-stage modality features per stage.
    pub features: Vec<Vec<StageFeature<'t>>>,
    pub fused: Vec<Var<'t>>,
    pub traces: Vec<Option<InteractionTrace<'t>>>,
}

impl SegModel {
    /// Builds the network and its freshly initialised parameters. Each
    /// component draws from its own stream of `seed`, so switching one
    /// component off leaves the others' initial weights unchanged.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let root = Rng::new(seed);
        let enc_cfg = &config.encoder;
        let m = config.num_modalities();

        let mut rng = root.derive(1);
        let encoder = Encoder::new(&mut Init::new(&mut store, &mut rng), config)?;

        let mut interaction = Vec::with_capacity(enc_cfg.num_stages());
        let mut fusion = Vec::with_capacity(enc_cfg.num_stages());
        for l in 0..enc_cfg.num_stages() {
            let stage = l + 1;
            let (c, heads) = (enc_cfg.widths[l], enc_cfg.heads[l]);
            interaction.push(if config.interaction.active_at(stage) {
                let mut rng = root.derive(100 + stage as u64);
                Some(InteractionBlock::new(
                    &mut Init::new(&mut store, &mut rng),
                    &config.interaction,
                    stage,
                    c,
                    heads,
                    m,
                )?)
            } else {
                None
            });
            fusion.push(if config.fusion.enabled {
                let mut rng = root.derive(200 + stage as u64);
                Some(FusionBlock::new(&mut Init::new(&mut store, &mut rng), &config.fusion, stage, c, m)?)
            } else {
                None
            });
        }
        let mut rng = root.derive(300);
        let decoder = Decoder::new(
            &mut Init::new(&mut store, &mut rng),
            &enc_cfg.widths,
            config.decoder.embed_dim,
            config.num_classes,
        )?;
        Ok((
            Self {
                config: config.clone(),
                encoder,
                interaction,
                fusion,
                decoder,
            },
            store,
        ))
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let (_, fresh) = Self::new(&self.config, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                store.len()
            )));
        }
        for ((na, ta), (nb, tb)) in fresh.iter().zip(store.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{na}` {:?}, found `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Validates a batch and returns its extent and the present slots, which
    /// must agree across the batch.
    pub fn check_batch(&self, batch: &[&ModalityBundle]) -> Result<(usize, usize, Vec<usize>)> {
        let first = batch.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w) = first.validate(&self.config)?;
        let present = first.present();
        for b in &batch[1..] {
            if b.validate(&self.config)? != (h, w) || b.present() != present {
                return Err(Error::Input("batch samples differ in extent or present modalities".into()));
            }
        }
        Ok((h, w, present))
    }

    pub fn forward<'t>(&self, s: &Session<'t>, batch: &[&ModalityBundle]) -> Result<ForwardOutput<'t>> {
        let (h, w, present) = self.check_batch(batch)?;
        let mut cur: Vec<StageFeature<'t>> = present
            .iter()
            .map(|&i| self.encoder.stem(s, batch, i))
            .collect::<Result<_>>()?;
        let mut features = Vec::with_capacity(self.encoder.stages.len());
        let mut fused = Vec::with_capacity(self.encoder.stages.len());
        let mut traces = Vec::with_capacity(self.encoder.stages.len());
        let mut pyramid = Vec::with_capacity(self.encoder.stages.len());
        for (l, stage) in self.encoder.stages.iter().enumerate() {
            let z: Vec<StageFeature<'t>> = cur.iter().map(|f| stage.embed(s, f)).collect::<Result<_>>()?;
            let (zt, trace) = match &self.interaction[l] {
                Some(block) => {
                    let (zt, trace) = block.forward(s, stage, &z)?;
                    (zt, Some(trace))
                }
                None => (z.iter().map(|f| stage.plain_block(s, f)).collect::<Result<_>>()?, None),
            };
            let zt: Vec<StageFeature<'t>> = zt.iter().map(|f| stage.finish(s, f)).collect::<Result<_>>()?;
            let f = match &self.fusion[l] {
                Some(block) => block.forward(s, &zt)?.fused,
                None => mean_fusion(&zt)?,
            };
            pyramid.push((f, zt[0].height, zt[0].width));
            fused.push(f);
            traces.push(trace);
            features.push(zt.clone());
            cur = zt;
        }
        let logits = self.decoder.decode(s, &pyramid, h, w)?;
        Ok(ForwardOutput {
            logits,
            height: h,
            width: w,
            present,
            features,
            fused,
            traces,
        })
    }

    /// Summed cross-entropy of one batch and its non-ignored pixel count.
    pub fn loss_sum<'t>(&self, s: &Session<'t>, batch: &[&ModalityBundle], labels: &[&[u8]]) -> Result<(Var<'t>, usize)> {
        let out = self.forward(s, batch)?;
        let flat: Vec<u8> = labels.iter().flat_map(|l| l.iter().copied()).collect();
        if flat.len() != batch.len() * out.height * out.width {
            return Err(Error::Data(format!(
                "{} labels for {} pixels",
                flat.len(),
                batch.len() * out.height * out.width
            )));
        }
        cross_entropy_sum(out.logits, &flat)
    }

    pub fn predict(&self, store: &ParamStore, batch: &[&ModalityBundle]) -> Result<SegmentationOutput> {
        let tape = Tape::new();
        let s = Session::inference(&tape, store);
        let out = self.forward(&s, batch)?;
        SegmentationOutput::from_logits(&out.logits.value(), out.height, out.width)
    }

    /// Multiply-accumulates of one inference pass over `bundle`, counted from
    /// the shapes of every matrix product, convolution and resampling.
    pub fn macs(&self, store: &ParamStore, bundle: &ModalityBundle) -> Result<u64> {
        let tape = Tape::new();
        let s = Session::inference(&tape, store);
        self.forward(&s, &[bundle])?;
        Ok(tape.macs())
    }
}

/// Total scalar parameter count.
pub fn param_count(store: &ParamStore) -> usize {
    store.num_scalars()
}

/// Random bundle with every modality of `config` present, and random labels.
pub fn random_example(config: &ModelConfig, h: usize, w: usize, seed: u64) -> (ModalityBundle, Vec<u8>) {
    let mut rng = Rng::new(seed);
    let slots = config
        .modalities
        .iter()
        .map(|m| {
            let data = (0..h * w * m.channels).map(|_| rng.normal()).collect();
            Some(Raster {
                height: h,
                width: w,
                channels: m.channels,
                data,
            })
        })
        .collect();
    let labels = (0..h * w).map(|_| rng.below(config.num_classes) as u8).collect();
    (ModalityBundle::new(slots), labels)
}

/// Compares reverse-mode gradients of the mean per-pixel loss on one random
/// `h×w` example against central differences, for every parameter of a
/// freshly initialised model.
pub fn end_to_end_grad_check(config: &ModelConfig, h: usize, w: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, mut store) = SegModel::new(config, seed)?;
    let (bundle, labels) = random_example(config, h, w, seed ^ 0x9E37);
    grad_check(
        &mut store,
        |s: &Session<'_>| {
            let (loss, count) = model.loss_sum(s, &[&bundle], &[&labels])?;
            Ok::<_, Error>(loss.scale(1.0 / count.max(1) as f64)?)
        },
        opts,
    )
}
