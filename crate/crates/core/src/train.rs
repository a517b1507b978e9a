//! Training loop, optimizer, schedule and the evaluation protocols built on
//! top of it: arbitrary-subset validation and component ablations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fuseg_tensor::{ParamStore, Rng, Session, Tape, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::decoder::IGNORE_LABEL;
use crate::encoder::ModalityBundle;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricRecord};
use crate::model::{param_count, SegModel};
use crate::par::{map_indexed, ExecMode};
use crate::synth::{all_subsets, generate_range, modality_specs, Sample, SceneSpec, MODALITIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    /// Learning-rate multiplier at the first warm-up step.
    pub warmup_factor: f64,
    pub power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            warmup_factor: 0.1,
            power: 1.0,
        }
    }
}

/// Synthetic scenes. Validation takes generator indices `0..val_samples`;
/// training takes the `train_samples` indices after them, or, with
/// `resample`, a fresh disjoint block of indices every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub val_samples: usize,
    pub resample: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_samples: 32,
            val_samples: 16,
            resample: true,
        }
    }
}

impl DataConfig {
    /// First generator index of the training samples of `epoch`.
    pub fn train_start(&self, epoch: usize) -> u64 {
        let block = if self.resample { epoch } else { 0 };
        (self.val_samples + block * self.train_samples) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Full-scale recipe: 200 epochs at base rate 6e-5.
    pub fn full_scale() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            model: SceneSpec::default().model_config(),
        }
    }

    /// Desk-scale default: 50 epochs with a larger base rate.
    pub fn toy() -> Self {
        let mut cfg = Self::full_scale();
        cfg.epochs = 50;
        cfg.optimizer.lr = 2e-3;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer.eps must be positive and weight_decay non-negative".into()));
        }
        let s = &self.schedule;
        if self.epochs == 0 || s.warmup_epochs >= self.epochs {
            return Err(Error::Config("need 0 <= warmup_epochs < epochs".into()));
        }
        if !(s.warmup_factor > 0.0 && s.warmup_factor <= 1.0) || !(s.power > 0.0) {
            return Err(Error::Config("need warmup_factor in (0, 1] and power > 0".into()));
        }
        if self.batch_size == 0 || self.data.train_samples == 0 || self.data.val_samples == 0 {
            return Err(Error::Config("batch_size and sample counts must be positive".into()));
        }
        if self.model.num_classes != self.data.scene.num_classes {
            return Err(Error::Config("model and scene disagree on the class count".into()));
        }
        let specs = modality_specs();
        for m in &self.model.modalities {
            if !specs.contains(m) {
                return Err(Error::Config(format!(
                    "modality `{}` with {} channels is not produced by the scene generator",
                    m.name, m.channels
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_string(self)?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train_samples.div_ceil(self.batch_size)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let spe = self.steps_per_epoch();
        LrSchedule {
            base: self.optimizer.lr,
            warmup_steps: self.schedule.warmup_epochs * spe,
            total_steps: self.epochs * spe,
            warmup_factor: self.schedule.warmup_factor,
            power: self.schedule.power,
        }
    }
}

/// Linear warm-up from `warmup_factor · base` to `base`, then polynomial
/// decay towards zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub warmup_factor: f64,
    pub power: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.base * (self.warmup_factor + (1.0 - self.warmup_factor) * t);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base * (1.0 - progress).powf(self.power)
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update at rate `lr`. `grads` is indexed like the store;
    /// `None` counts as a zero gradient. Non-finite gradients abort before
    /// any parameter changes.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Training("gradient list does not match the parameter store".into()));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Training(format!("gradient shape mismatch for `{}`", store.name(id))));
                }
                if !g.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient for `{}`", store.name(id))));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for (i, w) in store.values_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, wj) in w.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *wj = *wj * decay - lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Reorders a scene sample's slots to the model's modality list.
pub fn project_bundle(bundle: &ModalityBundle, model: &ModelConfig) -> Result<ModalityBundle> {
    let slots = model
        .modalities
        .iter()
        .map(|m| {
            let i = MODALITIES
                .iter()
                .position(|(n, _)| *n == m.name)
                .ok_or_else(|| Error::Input(format!("unknown modality `{}`", m.name)))?;
            Ok(bundle.slots.get(i).cloned().flatten())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalityBundle::new(slots))
}

/// Validation scenes plus the source of per-epoch training scenes, both
/// projected onto the model's modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub model: ModelConfig,
    pub val: Vec<Sample>,
    fixed_train: Option<Vec<Sample>>,
}

impl Dataset {
    pub fn generate(cfg: &TrainConfig, exec: ExecMode) -> Result<Self> {
        let d = &cfg.data;
        let val = project_samples(generate_range(&d.scene, 0, d.val_samples, exec)?, &cfg.model)?;
        let fixed_train = if d.resample {
            None
        } else {
            Some(project_samples(generate_range(&d.scene, d.train_start(0), d.train_samples, exec)?, &cfg.model)?)
        };
        Ok(Self {
            config: d.clone(),
            model: cfg.model.clone(),
            val,
            fixed_train,
        })
    }

    /// Training scenes of `epoch`, in generator order.
    pub fn train_epoch(&self, epoch: usize, exec: ExecMode) -> Result<Vec<Sample>> {
        match &self.fixed_train {
            Some(t) => Ok(t.clone()),
            None => {
                let d = &self.config;
                project_samples(generate_range(&d.scene, d.train_start(epoch), d.train_samples, exec)?, &self.model)
            }
        }
    }

    /// The same scenes seen through another model's modalities.
    pub fn for_model(&self, model: &ModelConfig) -> Result<Self> {
        let reproject = |v: &[Sample]| -> Result<Vec<Sample>> {
            v.iter()
                .map(|s| {
                    Ok(Sample {
                        bundle: reproject_bundle(&s.bundle, &self.model, model)?,
                        labels: s.labels.clone(),
                    })
                })
                .collect()
        };
        Ok(Self {
            config: self.config.clone(),
            model: model.clone(),
            val: reproject(&self.val)?,
            fixed_train: self.fixed_train.as_deref().map(reproject).transpose()?,
        })
    }
}

fn project_samples(samples: Vec<Sample>, model: &ModelConfig) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|s| {
            Ok(Sample {
                bundle: project_bundle(&s.bundle, model)?,
                labels: s.labels,
            })
        })
        .collect()
}

fn reproject_bundle(bundle: &ModalityBundle, from: &ModelConfig, to: &ModelConfig) -> Result<ModalityBundle> {
    let slots = to
        .modalities
        .iter()
        .map(|m| {
            from.modality_index(&m.name)
                .map(|i| bundle.slots[i].clone())
                .ok_or_else(|| Error::Input(format!("modality `{}` is not in the dataset", m.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalityBundle::new(slots))
}

/// Confusion matrix of the model's predictions over `samples`.
pub fn evaluate(model: &SegModel, store: &ParamStore, samples: &[Sample], exec: ExecMode) -> Result<ConfusionMatrix> {
    let parts = map_indexed(exec, samples.len(), |i| -> Result<ConfusionMatrix> {
        let s = &samples[i];
        let out = model.predict(store, &[&s.bundle])?;
        let mut cm = ConfusionMatrix::new(model.config.num_classes);
        cm.accumulate(&out.labels[0], &s.labels, Some(IGNORE_LABEL))?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(model.config.num_classes);
    for cm in parts {
        total.merge(&cm?)?;
    }
    Ok(total)
}

/// mIoU of predicting the most frequent class everywhere.
pub fn chance_baseline(samples: &[Sample], num_classes: usize) -> Result<f64> {
    let mut freq = vec![0u64; num_classes];
    for s in samples {
        for &l in &s.labels {
            if l != IGNORE_LABEL {
                *freq
                    .get_mut(l as usize)
                    .ok_or_else(|| Error::Data(format!("label {l} out of range")))? += 1;
            }
        }
    }
    let majority = (0..num_classes).max_by_key(|&c| (freq[c], std::cmp::Reverse(c))).unwrap_or(0) as u8;
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in samples {
        cm.accumulate(&vec![majority; s.labels.len()], &s.labels, Some(IGNORE_LABEL))?;
    }
    Ok(cm.miou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_accuracy: f64,
}

/// Where and how a run executes; neither affects its results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub exec: ExecMode,
    /// Receives `train.jsonl`, `config.toml` and the `best`/`last` checkpoints.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub log: Vec<EpochRecord>,
    pub config_hash: String,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

struct SampleGrad {
    loss: f64,
    count: usize,
    grads: Vec<Option<Tensor>>,
}

fn sample_gradient(model: &SegModel, store: &ParamStore, sample: &Sample) -> Result<SampleGrad> {
    let tape = Tape::new();
    let s = Session::new(&tape, store);
    let (loss, count) = model.loss_sum(&s, &[&sample.bundle], &[&sample.labels])?;
    let value = loss.value().item();
    let grads = tape.backward(loss)?;
    Ok(SampleGrad {
        loss: value,
        count,
        grads: s.param_grads(&grads),
    })
}

/// Mean per-pixel loss and gradient of one batch. Per-sample gradients may be
/// computed concurrently; they are summed in sample order.
pub fn batch_gradient(
    model: &SegModel,
    store: &ParamStore,
    batch: &[&Sample],
    exec: ExecMode,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let parts = map_indexed(exec, batch.len(), |i| sample_gradient(model, store, batch[i]));
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut total: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for part in parts {
        let part = part?;
        loss += part.loss;
        count += part.count;
        for (acc, g) in total.iter_mut().zip(part.grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => *acc = Some(g.into_data()),
            }
        }
    }
    if count == 0 {
        return Err(Error::Training("batch has no labelled pixels".into()));
    }
    let inv = 1.0 / count as f64;
    let grads = total
        .into_iter()
        .zip(store.values())
        .map(|(g, t)| g.map(|g| Tensor::new(t.shape(), g.into_iter().map(|v| v * inv).collect())).transpose())
        .collect::<std::result::Result<_, _>>()?;
    Ok((loss * inv, grads))
}

/// Trains from scratch, validating after every epoch and keeping the
/// parameters of the best validation mIoU (earliest on ties).
pub fn train(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::generate(cfg, opts.exec)?;
    train_on(cfg, &data, opts)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.config != cfg.data || data.model.modalities != cfg.model.modalities {
        return Err(Error::Config("dataset was generated for a different data or modality config".into()));
    }
    let hash = cfg.hash()?;
    let (model, mut store) = SegModel::new(&cfg.model, cfg.seed)?;
    let log_path = match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let p = dir.join("train.jsonl");
            if p.exists() {
                fs::remove_file(&p)?;
            }
            Some(p)
        }
        None => None,
    };
    let schedule = cfg.lr_schedule();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &store);
    let shuffle_root = Rng::new(cfg.seed).derive(7);
    let mut order: Vec<usize> = (0..cfg.data.train_samples).collect();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let train_set = data.train_epoch(epoch, opts.exec)?;
        if train_set.len() != order.len() {
            return Err(Error::Data("training set size differs from the config".into()));
        }
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = schedule.lr_at(step);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&model, &store, &batch, opts.exec)?;
            if !loss.is_finite() {
                if let Some(dir) = &opts.out {
                    Checkpoint {
                        store: store.clone(),
                        step: step as u64,
                        config_hash: hash.clone(),
                    }
                    .save(&dir.join("last_good"))?;
                }
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            lr = schedule.lr_at(step);
            opt.update(&mut store, &grads, lr)?;
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let cm = evaluate(&model, &store, &data.val, opts.exec)?;
        let rec = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / batches as f64,
            val_miou: cm.miou(),
            val_accuracy: cm.pixel_accuracy().value,
        };
        log::info!("epoch {epoch} loss {:.4} val mIoU {:.4}", rec.train_loss, rec.val_miou);
        if let Some(p) = &log_path {
            append_line(p, &serde_json::to_string(&rec)?)?;
        }
        if best.as_ref().is_none_or(|(_, m, _)| rec.val_miou > *m) {
            best = Some((
                epoch,
                rec.val_miou,
                Checkpoint {
                    store: store.clone(),
                    step: step as u64,
                    config_hash: hash.clone(),
                },
            ));
        }
        log.push(rec);
    }
    let (best_epoch, best_miou, best) = best.expect("at least one epoch");
    let last = Checkpoint {
        store,
        step: step as u64,
        config_hash: hash.clone(),
    };
    if let Some(dir) = &opts.out {
        best.save(&dir.join("best"))?;
        last.save(&dir.join("last"))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        last,
        best_epoch,
        best_miou,
        log,
        config_hash: hash,
    })
}

/// Rebuilds the model for `cfg` and checks that `ck` fits it.
pub fn load_model(cfg: &TrainConfig, ck: &Checkpoint) -> Result<SegModel> {
    let (model, _) = SegModel::new(&cfg.model, cfg.seed)?;
    model.check_store(&ck.store)?;
    if ck.config_hash != cfg.hash()? {
        return Err(Error::Checkpoint("checkpoint was trained under a different config".into()));
    }
    Ok(model)
}

/// Validation over every nonempty modality subset plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetTable {
    pub rows: Vec<MetricRecord>,
    pub mean_miou: f64,
    pub mean_accuracy: f64,
}

impl SubsetTable {
    pub fn row(&self, subset: &str) -> Option<&MetricRecord> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    /// The rows followed by a `mean` record.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&r.to_json_line()?);
            out.push('\n');
        }
        let first = self.rows.first();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "subset": "mean",
            "mIoU": self.mean_miou,
            "accuracy": self.mean_accuracy,
            "seed": first.map_or(0, |r| r.seed),
            "config_hash": first.map_or("", |r| r.config_hash.as_str()),
        }))?);
        out.push('\n');
        Ok(out)
    }
}

/// Evaluates `samples` with only the modalities of each subset present.
/// `subsets` defaults to all `2^m - 1` subsets, ordered by size.
pub fn evaluate_subsets(
    model: &SegModel,
    store: &ParamStore,
    samples: &[Sample],
    subsets: Option<&[Vec<usize>]>,
    seed: u64,
    config_hash: &str,
    exec: ExecMode,
) -> Result<SubsetTable> {
    let all;
    let subsets = match subsets {
        Some(s) => s,
        None => {
            all = all_subsets(model.config.num_modalities());
            &all
        }
    };
    let mut rows = Vec::with_capacity(subsets.len());
    for keep in subsets {
        let name = keep
            .iter()
            .map(|&i| {
                model
                    .config
                    .modalities
                    .get(i)
                    .map(|m| m.name.clone())
                    .ok_or_else(|| Error::Input(format!("subset names slot {i}")))
            })
            .collect::<Result<Vec<_>>>()?
            .join("+");
        let reduced: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                bundle: s.bundle.subset(keep),
                labels: s.labels.clone(),
            })
            .collect();
        let cm = evaluate(model, store, &reduced, exec)?;
        rows.push(MetricRecord::from_matrix(&name, &cm, seed, config_hash));
    }
    if rows.is_empty() {
        return Err(Error::Input("no subsets to evaluate".into()));
    }
    let n = rows.len() as f64;
    let mean_miou = rows.iter().map(|r| r.miou).sum::<f64>() / n;
    let mean_accuracy = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
    Ok(SubsetTable {
        rows,
        mean_miou,
        mean_accuracy,
    })
}

/// A model variant for the component and stage-insertion ablations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoInteraction,
    NoFusion,
    Neither,
    /// Interaction blocks only at these 1-based stages; fusion on.
    Stages(Vec<usize>),
}

impl Variant {
    pub fn components() -> Vec<Variant> {
        vec![Variant::Full, Variant::NoInteraction, Variant::NoFusion, Variant::Neither]
    }

    /// Each single stage, then all stages.
    pub fn stage_sweep(num_stages: usize) -> Vec<Variant> {
        let mut v: Vec<Variant> = (1..=num_stages).map(|s| Variant::Stages(vec![s])).collect();
        v.push(Variant::Stages((1..=num_stages).collect()));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoInteraction => "no_interaction".into(),
            Variant::NoFusion => "no_fusion".into(),
            Variant::Neither => "neither".into(),
            Variant::Stages(s) => {
                let s: Vec<String> = s.iter().map(usize::to_string).collect();
                format!("stages_{}", s.join("_"))
            }
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {
                cfg.interaction.enabled = true;
                cfg.fusion.enabled = true;
            }
            Variant::NoInteraction => {
                cfg.interaction.enabled = false;
                cfg.fusion.enabled = true;
            }
            Variant::NoFusion => {
                cfg.interaction.enabled = true;
                cfg.fusion.enabled = false;
            }
            Variant::Neither => {
                cfg.interaction.enabled = false;
                cfg.fusion.enabled = false;
            }
            Variant::Stages(stages) => {
                cfg.interaction.enabled = true;
                cfg.interaction.stages = stages.clone();
                cfg.fusion.enabled = true;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub accuracy: f64,
    pub params: usize,
    pub macs: u64,
    pub best_epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl AblationRow {
    pub fn from_outcome(variant: &Variant, cfg: &TrainConfig, outcome: &TrainOutcome, data: &Dataset, exec: ExecMode) -> Result<Self> {
        let store = &outcome.best.store;
        let probe = data.val.first().ok_or_else(|| Error::Data("empty validation set".into()))?;
        let cm = evaluate(&outcome.model, store, &data.val, exec)?;
        Ok(Self {
            variant: variant.name(),
            miou: cm.miou(),
            accuracy: cm.pixel_accuracy().value,
            params: param_count(store),
            macs: outcome.model.macs(store, &probe.bundle)?,
            best_epoch: outcome.best_epoch,
            seed: cfg.seed,
            config_hash: outcome.config_hash.clone(),
        })
    }
}

/// Trains every variant with the same seed, data and schedule.
pub fn ablate(cfg: &TrainConfig, variants: &[Variant], opts: &RunOptions) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = Dataset::generate(cfg, opts.exec)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut vcfg = cfg.clone();
        vcfg.model = v.apply(&cfg.model);
        let vopts = RunOptions {
            exec: opts.exec,
            out: opts.out.as_ref().map(|d| d.join(v.name())),
        };
        let outcome = train_on(&vcfg, &data, &vopts)?;
        let row = AblationRow::from_outcome(v, &vcfg, &outcome, &data, opts.exec)?;
        if let Some(dir) = &opts.out {
            append_line(&dir.join("ablation.jsonl"), &serde_json::to_string(&row)?)?;
        }
        rows.push(row);
    }
    Ok(rows)
}
