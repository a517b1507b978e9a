//! Model configuration. Every hyperparameter of the encoder, the interaction
//! block, the fusion module and the decoder lives here and round-trips
//! through the TOML config file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
}

impl ModalitySpec {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub strides: Vec<usize>,
    pub ffn_expansion: usize,
    /// Width every modality is projected to before the shared stem.
    pub stem_channels: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            heads: vec![1, 2, 4, 8],
            sr_ratios: vec![4, 2, 2, 1],
            strides: vec![4, 2, 2, 2],
            ffn_expansion: 4,
            stem_channels: 3,
            ln_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    /// Patch-embedding kernel for a stride: overlapping `2s-1` taps, or a
    /// pointwise projection when `s = 1`.
    pub fn patch_kernel(stride: usize) -> usize {
        if stride == 1 {
            1
        } else {
            2 * stride - 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.widths.len();
        if s == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for (name, len) in [
            ("heads", self.heads.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("strides", self.strides.len()),
        ] {
            if len != s {
                return Err(Error::Config(format!("encoder.{name} has {len} entries, expected {s}")));
            }
        }
        for l in 0..s {
            let (c, h) = (self.widths[l], self.heads[l]);
            if c == 0 || h == 0 || self.sr_ratios[l] == 0 || self.strides[l] == 0 {
                return Err(Error::Config(format!("stage {}: widths, heads, sr and stride must be positive", l + 1)));
            }
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: width {c} is not divisible by {h} heads",
                    l + 1
                )));
            }
        }
        if self.ffn_expansion == 0 || self.stem_channels == 0 || !(self.ln_eps > 0.0) {
            return Err(Error::Config("ffn_expansion, stem_channels and ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Whether cross-modal parameters are shared by all ordered modality pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairParams {
    Tied,
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub enabled: bool,
    /// 1-based encoder stages that run the interaction block.
    pub stages: Vec<usize>,
    pub tau_m: f64,
    pub tau_a: f64,
    pub tau_mix: f64,
    pub kappa: f64,
    /// Initial value of the source-conditioned affine residual coefficient.
    pub sca_init: f64,
    /// Initial Gaussian bias width, in normalised grid units.
    pub sigma_init: f64,
    /// Number of pooled source grids; scale `s` uses `ceil(H / 2^s)`.
    pub grid_scales: usize,
    pub pair_params: PairParams,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stages: vec![1, 2, 3, 4],
            tau_m: 1.0,
            tau_a: 0.1,
            tau_mix: 1.0,
            kappa: 4.0,
            sca_init: 2e-2,
            sigma_init: 0.5,
            grid_scales: 2,
            pair_params: PairParams::Tied,
        }
    }
}

impl InteractionConfig {
    pub fn active_at(&self, stage: usize) -> bool {
        self.enabled && self.stages.contains(&stage)
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        for (name, v) in [
            ("tau_m", self.tau_m),
            ("tau_a", self.tau_a),
            ("tau_mix", self.tau_mix),
            ("kappa", self.kappa),
            ("sigma_init", self.sigma_init),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("interaction.{name} must be positive, got {v}")));
            }
        }
        if self.grid_scales == 0 {
            return Err(Error::Config("interaction.grid_scales must be at least 1".into()));
        }
        if let Some(&bad) = self.stages.iter().find(|&&s| s == 0 || s > num_stages) {
            return Err(Error::Config(format!("interaction stage {bad} outside 1..={num_stages}")));
        }
        Ok(())
    }
}

/// Source of the fusion residual logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// One learned logit per modality and stage.
    Static,
    /// Logits predicted from each modality's pooled descriptor.
    Conditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub enabled: bool,
    pub tau: f64,
    pub residual_mode: ResidualMode,
    pub kernel_sizes: Vec<usize>,
    pub squeeze_ratio: usize,
    /// Hidden expansion of the pointwise merge after the depthwise branches.
    pub merge_expansion: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 1.0,
            residual_mode: ResidualMode::Static,
            kernel_sizes: vec![3, 5, 7],
            squeeze_ratio: 4,
            merge_expansion: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { embed_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub interaction: InteractionConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: default_modalities(),
            num_classes: 4,
            encoder: EncoderConfig::default(),
            interaction: InteractionConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

/// The four synthetic sensor roles.
pub fn default_modalities() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("intensity", 3),
        ModalitySpec::new("geometry", 1),
        ModalitySpec::new("edges", 1),
        ModalitySpec::new("material", 1),
    ]
}

impl ModelConfig {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.channels == 0 {
                return Err(Error::Config(format!("modality `{}` has zero channels", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", m.name)));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.encoder.validate()?;
        self.interaction.validate(self.encoder.num_stages())?;
        if !(self.fusion.tau > 0.0) || self.fusion.squeeze_ratio == 0 || self.fusion.merge_expansion == 0 {
            return Err(Error::Config("fusion.tau, squeeze_ratio and merge_expansion must be positive".into()));
        }
        if let Some(&k) = self.fusion.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("fusion kernel size {k} must be odd")));
        }
        if self.decoder.embed_dim == 0 {
            return Err(Error::Config("decoder.embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Keeps only the named modalities, in the given order.
    pub fn restricted_to(&self, names: &[&str]) -> Result<Self> {
        let mut out = self.clone();
        out.modalities = names
            .iter()
            .map(|n| {
                self.modalities
                    .iter()
                    .find(|m| m.name == *n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown modality `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = ModelConfig::default();
        c.encoder.heads[1] = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut c = ModelConfig::default();
        c.interaction.tau_a = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.fusion.tau = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c: ModelConfig = toml::from_str("num_classes = 6\n[interaction]\nstages = [2]\n").unwrap();
        assert_eq!(c.num_classes, 6);
        assert_eq!(c.interaction.stages, vec![2]);
        assert_eq!(c.encoder, EncoderConfig::default());
    }
}
