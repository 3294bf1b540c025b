//! Run configuration. Every section has defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{default_families, OrganFamilySpec};
use crate::error::{Error, Result};

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub adapter_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 32,
            n_layers: 4,
            n_heads: 4,
            adapter_hidden: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_layers < 4 || self.n_layers % 4 != 0 {
            return invalid(format!(
                "n_layers {} must be a positive multiple of 4 (four sub-blocks)",
                self.n_layers
            ));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return invalid(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.adapter_hidden == 0 {
            return invalid("adapter_hidden must be positive");
        }
        Ok(())
    }

    /// Token grid side `h = w = image_size / patch_size`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Visual prompts interpolated from the first embedding.
    SelfSampling,
    /// Fixed sinusoidal features of the point coordinates.
    Positional,
    /// Embedding passthrough.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub n_queries: usize,
    pub train_pos: usize,
    pub train_neg: usize,
    pub eval_pos: usize,
    pub eval_neg: usize,
    /// Frequencies per axis for the positional variant.
    pub pe_freqs: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::SelfSampling,
            n_queries: 8,
            train_pos: 3,
            train_neg: 3,
            eval_pos: 1,
            eval_neg: 0,
            pe_freqs: 4,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return invalid("n_queries must be at least 1");
        }
        if self.train_pos == 0 || self.eval_pos == 0 {
            return invalid("prompts need at least one positive point");
        }
        if self.pe_freqs == 0 {
            return invalid("pe_freqs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Mask attention on every level before fusion.
    Fmad,
    /// Per-level convolution and fusion only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub tau: f64,
    /// Support-mask blur at embedding resolution, in embedding pixels.
    pub sigma: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Fmad,
            tau: 0.1,
            sigma: 2.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Architecture: everything needed to rebuild parameters and run a forward pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Outer loop over adapted parameters.
    Meta,
    /// Ordinary supervised training on the same pairs.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta0: f64,
    pub eta_min: f64,
    pub inner_steps: usize,
    pub pairs: usize,
    pub tasks: usize,
    pub epochs: usize,
    pub second_order: bool,
    pub outer: OuterOptimizer,
    pub mode: TrainMode,
    pub seed: u64,
    /// Worker threads for per-task adaptation; 1 keeps everything on the caller's thread.
    pub workers: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta0: 2e-4,
            eta_min: 0.0,
            inner_steps: 5,
            pairs: 5,
            tasks: 3,
            epochs: 50,
            second_order: false,
            outer: OuterOptimizer::Adam,
            mode: TrainMode::Meta,
            seed: 0,
            workers: 1,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return invalid(format!("beta0 must be nonnegative, got {}", self.beta0));
        }
        if !(0.0..=self.beta0).contains(&self.eta_min) {
            return invalid(format!("eta_min {} must lie in [0, beta0]", self.eta_min));
        }
        if self.pairs == 0 || self.tasks == 0 {
            return invalid("pairs and tasks must be at least 1");
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub families: Vec<OrganFamilySpec>,
    pub n_slices: usize,
    pub size: usize,
    pub n_volumes: usize,
    pub n_chunks: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            families: default_families(),
            n_slices: 36,
            size: 64,
            n_volumes: 5,
            n_chunks: 12,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return invalid("at least one organ family is required");
        }
        for f in &self.families {
            f.validate()?;
        }
        if self.n_slices == 0 || self.n_volumes == 0 || self.n_chunks == 0 {
            return invalid("n_slices, n_volumes and n_chunks must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meta.validate()?;
        self.data.validate()?;
        if self.data.size != self.model.encoder.image_size {
            return invalid(format!(
                "data.size {} must equal model.encoder.image_size {}",
                self.data.size, self.model.encoder.image_size
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `self` with the keys present in `text` replaced, recursively through
    /// objects. Arrays are replaced whole.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let mut v = serde_json::to_value(self).map_err(bad)?;
        merge(&mut v, serde_json::from_str(text).map_err(bad)?);
        let cfg: Config = serde_json::from_value(v).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small preset used by the benchmark harness, examples and tests.
    pub fn desk() -> Self {
        let mut cfg = Config::default();
        cfg.model.encoder = EncoderConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 16,
            n_layers: 4,
            n_heads: 2,
            adapter_hidden: 4,
        };
        cfg.model.decoder.sigma = 1.0;
        cfg.data.size = 32;
        cfg
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        Config::desk().validate().unwrap();
    }

    #[test]
    fn overlay_keeps_unlisted_keys() {
        let cfg = Config::desk().overlay(r#"{"meta": {"alpha": 0.25}}"#).unwrap();
        assert_eq!(cfg.meta.alpha, 0.25);
        assert_eq!(cfg.meta.beta0, Config::desk().meta.beta0);
        assert_eq!(cfg.model, Config::desk().model);
        let err = Config::desk().overlay(r#"{"meta": {"alpah": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(Config::desk().overlay(r#"{"meta": {"alpha": -1}}"#).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_json(r#"{"meta": {"alpah": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = Config::from_json(r#"{"meta": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.meta.epochs, 3);
        assert_eq!(cfg.meta.alpha, 1e-2);
    }

    #[test]
    fn bad_encoder_geometry() {
        let e = EncoderConfig {
            patch_size: 7,
            ..EncoderConfig::default()
        };
        assert!(e.validate().is_err());
        let e = EncoderConfig {
            n_layers: 6,
            ..EncoderConfig::default()
        };
        assert!(e.validate().is_err());
    }
}
