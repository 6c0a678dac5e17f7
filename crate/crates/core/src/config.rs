//! Run configuration, read from TOML with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CalibrationQueries, FusionMode};
use crate::grounding::LossWeights;
use crate::synthdata::CorpusConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of word embeddings and projected frames.
    pub embed_dim: usize,
    /// Encoder output width D.
    pub hidden: usize,
    /// Fusion latent width D'.
    pub latent: usize,
    pub video_slots: usize,
    pub query_slots: usize,
    pub memory: bool,
    /// One bank per role instead of one shared bank per domain.
    pub separate_memory: bool,
    pub fusion: FusionMode,
    pub calibration: CalibrationQueries,
    /// Multiplier on cosine similarities in memory addressing; 1 is the
    /// plain softmax-over-cosine rule.
    pub addressing_sharpness: f64,
    /// Added to the diagonal of every attention query/key map at
    /// initialization; 0 keeps the plain uniform initialization.
    pub attention_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 32,
            latent: 32,
            video_slots: 64,
            query_slots: 64,
            memory: true,
            separate_memory: false,
            fusion: FusionMode::Full,
            calibration: CalibrationQueries::Global,
            addressing_sharpness: 1.0,
            attention_init_gain: 0.0,
        }
    }
}

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Rate for 0-based `epoch` of `epochs`.
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling per batch; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 16, epochs: 30, clip_norm: 5.0, schedule: LrSchedule::Constant }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Corpus file; generated from `corpus` when absent.
    pub corpus_path: Option<PathBuf>,
    /// Run validation after every epoch.
    pub validate: bool,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            corpus_path: None,
            validate: true,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let m = &self.model;
        for (name, v) in [
            ("embed_dim", m.embed_dim),
            ("hidden", m.hidden),
            ("latent", m.latent),
            ("video_slots", m.video_slots),
            ("query_slots", m.query_slots),
            ("batch_size", self.optim.batch_size),
            ("epochs", self.optim.epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(m.addressing_sharpness > 0.0 && m.addressing_sharpness.is_finite()) {
            return Err(Error::Config("addressing_sharpness must be positive".into()));
        }
        if !(m.attention_init_gain >= 0.0 && m.attention_init_gain.is_finite()) {
            return Err(Error::Config("attention_init_gain must be finite and non-negative".into()));
        }
        let o = &self.optim;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.clip_norm >= 0.0) {
            return Err(Error::Config("eps must be positive and clip_norm non-negative".into()));
        }
        self.loss.validate()
    }
}
