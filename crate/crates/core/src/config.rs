//! Experiment configuration: every hyper-parameter, the ablation switch, and
//! a canonical hash used to bind checkpoints to the config that made them.
//!
//! The file format is TOML with the sections `[data]`, `[encoder]`, `[ib]`,
//! `[translation]`, `[fusion]`, `[train]` and `[eval]`. Every key is optional
//! and falls back to [`ExperimentConfig::default`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bottleneck::IbConfig;
use crate::data::DatasetSpec;
use crate::encoders::EncoderMixing;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::protocols::Protocol;
use crate::translation::TranslationConfig;

/// The model variants of the ablation table, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoTib,
    NoLib,
    NoCyclicInteraction,
    NoCyclicTranslation,
    NoInformativeSpace,
    NoTranslatedLatents,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoTib,
        Ablation::NoLib,
        Ablation::NoCyclicInteraction,
        Ablation::NoCyclicTranslation,
        Ablation::NoInformativeSpace,
        Ablation::NoTranslatedLatents,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTib => "no_tib",
            Ablation::NoLib => "no_lib",
            Ablation::NoCyclicInteraction => "no_cyclic_interaction",
            Ablation::NoCyclicTranslation => "no_cyclic_translation",
            Ablation::NoInformativeSpace => "no_informative_space",
            Ablation::NoTranslatedLatents => "no_translated_latents",
        }
    }

    /// Row label as printed in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "CyIN",
            Ablation::NoTib => "w/o L_tib",
            Ablation::NoLib => "w/o L_lib",
            Ablation::NoCyclicInteraction => "w/o Cyclic Interaction",
            Ablation::NoCyclicTranslation => "w/o Cyclic Translation",
            Ablation::NoInformativeSpace => "w/o Informative Space",
            Ablation::NoTranslatedLatents => "w/o Translated Latents",
        }
    }

    pub fn order(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("listed")
    }

    /// Whether the IB encoders exist at all.
    pub fn uses_bottleneck(self) -> bool {
        self != Ablation::NoInformativeSpace
    }

    pub fn uses_tib(self) -> bool {
        self.uses_bottleneck() && self != Ablation::NoTib
    }

    pub fn uses_lib(self) -> bool {
        self.uses_bottleneck() && self != Ablation::NoLib
    }

    /// Cross-modal token IB terms in addition to the self terms.
    pub fn tib_cross_terms(self) -> bool {
        self != Ablation::NoCyclicInteraction
    }

    pub fn uses_cycle(self) -> bool {
        self != Ablation::NoCyclicTranslation
    }

    /// Missing latents are replaced by translations.
    pub fn substitutes_translations(self) -> bool {
        self != Ablation::NoTranslatedLatents
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|a| a.tag() == s.trim()).ok_or_else(|| {
            let tags: Vec<&str> = Self::ALL.iter().map(|a| a.tag()).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", tags.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Unimodal representation width `C_U`.
    pub rep_dim: usize,
    pub mixing: EncoderMixing,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { rep_dim: 256, mixing: EncoderMixing::Attention }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight `gamma` of the translation losses in the second stage.
    pub gamma: f64,
    /// Fraction of epochs in the first stage (`gamma = 0`, complete view).
    pub stage_split: f64,
    /// Missing rates drawn uniformly per batch in the second stage.
    pub mr_curriculum: Vec<f64>,
    /// Fraction of the dataset held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr_encoder: 4e-5,
            lr_other: 1e-3,
            weight_decay: 1e-2,
            optimizer: OptimizerKind::Adamw,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            gamma: 10.0,
            stage_split: 0.1,
            mr_curriculum: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            test_fraction: 0.2,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    /// Number of first-stage epochs.
    pub fn stage1_epochs(&self) -> usize {
        (self.stage_split * self.epochs as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    /// Seed of the evaluation mask substream.
    pub mask_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocols: vec![Protocol::Complete], mask_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub encoder: EncoderConfig,
    pub ib: IbConfig,
    pub translation: TranslationConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Small dimensions that train in seconds on the synthetic data.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.num_samples = 600;
        c.encoder.rep_dim = 32;
        c.ib = IbConfig { bottleneck_dim: 16, beta: 16.0, hidden_dim: 32 };
        c.translation.num_blocks = 2;
        c.translation.widths = vec![16, 8];
        c.fusion = FusionConfig { num_heads: 2, num_layers: 1, ff_hidden: 32, head_hidden: 32, ..FusionConfig::default() };
        c.train.epochs = 10;
        c.train.batch_size = 32;
        c.train.lr_encoder = 1e-3;
        c.train.lr_other = 1e-3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.ib.validate()?;
        self.translation.validate(self.data.num_modalities)?;
        let latent = self.fusion_dim();
        self.fusion.validate(latent)?;
        let t = &self.train;
        if self.encoder.rep_dim == 0 {
            return Err(Error::Config("encoder.rep_dim must be >= 1".into()));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(t.gamma >= 0.0 && t.gamma.is_finite()) {
            return Err(Error::Config(format!("train.gamma must be >= 0, got {}", t.gamma)));
        }
        if !(0.0..=1.0).contains(&t.stage_split) {
            return Err(Error::Config(format!("train.stage_split must lie in [0, 1], got {}", t.stage_split)));
        }
        for (name, v) in [("lr_encoder", t.lr_encoder), ("lr_other", t.lr_other), ("adam_eps", t.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(t.weight_decay >= 0.0) || !(t.clip_norm >= 0.0) {
            return Err(Error::Config("train.weight_decay and train.clip_norm must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if t.mr_curriculum.is_empty() || t.mr_curriculum.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("train.mr_curriculum needs values in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&t.test_fraction) {
            return Err(Error::Config(format!("train.test_fraction must lie in [0, 1), got {}", t.test_fraction)));
        }
        for p in &self.eval.protocols {
            p.validate(self.data.num_modalities)?;
        }
        Ok(())
    }

    /// Width of the latents that reach translators and fusion.
    pub fn fusion_dim(&self) -> usize {
        if self.train.ablation.uses_bottleneck() {
            self.ib.bottleneck_dim
        } else {
            self.encoder.rep_dim
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the canonical JSON of everything but `[eval]`, which only
    /// selects protocols and never changes the trained model.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.eval = EvalConfig::default();
        let canonical = serde_json::to_string(&c).expect("config serializes to JSON");
        hex_digest(canonical.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
