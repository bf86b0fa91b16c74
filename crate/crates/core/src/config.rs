//! Model and training hyperparameters, loadable from a TOML file with
//! `[model]` and `[train]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of prompt embeddings.
    pub text_dim: usize,
    /// Width of visual tokens and graph node states.
    pub embed_dim: usize,
    pub heads: usize,
    pub graph_layers: usize,
    pub top_k: usize,
    /// Fixed temperature of the relevance gates.
    pub temperature: f64,
    /// Additive smoothing of the co-occurrence prior.
    pub ppmi_smoothing: f64,
    /// When false, node states skip message passing entirely.
    pub use_graph: bool,
    /// When false, each prototype is the embedding of the bare value name.
    pub prompt_ensemble: bool,
    /// Seed of the built-in hash text encoder.
    pub encoder_seed: u64,
    /// Precomputed prompt embeddings; replaces the hash encoder when set.
    pub embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_dim: 128,
            embed_dim: 64,
            heads: 4,
            graph_layers: 2,
            top_k: 8,
            temperature: 1.0,
            ppmi_smoothing: 1.0,
            use_graph: true,
            prompt_ensemble: true,
            encoder_seed: 0,
            embeddings: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if self.graph_layers == 0 {
            return Err(Error::Config("graph_layers must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.ppmi_smoothing >= 0.0) || !self.ppmi_smoothing.is_finite() {
            return Err(Error::Config(format!("ppmi_smoothing must be >= 0, got {}", self.ppmi_smoothing)));
        }
        Ok(())
    }
}

/// Per-term multipliers of the training objective. All 1.0 gives the plain
/// sum of the four terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub align: f64,
    pub concept: f64,
    pub cons: f64,
    pub diag: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            align: 1.0,
            concept: 1.0,
            cons: 1.0,
            diag: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub class_balanced: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            weight_decay: 5e-3,
            epochs: 30,
            batch_size: 32,
            warmup_fraction: 0.05,
            label_smoothing: 0.05,
            seed: 0,
            class_balanced: true,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must be in [0, 0.5), got {}", self.label_smoothing)));
        }
        let w = &self.loss_weights;
        if [w.align, w.concept, w.cons, w.diag].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Relative `embeddings` paths are resolved against the config file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let (Some(p), Some(dir)) = (&cfg.model.embeddings, path.parent()) {
            if p.is_relative() {
                cfg.model.embeddings = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
