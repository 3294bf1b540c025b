//! Model and training variants for ablation studies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Config, DecoderKind, PromptMode, TrainMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub prompt: PromptMode,
    pub decoder: DecoderKind,
    pub training: TrainMode,
}

impl Variant {
    pub const FULL: Variant = Variant {
        prompt: PromptMode::SelfSampling,
        decoder: DecoderKind::Fmad,
        training: TrainMode::Meta,
    };

    pub fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        cfg.model.prompt.mode = self.prompt;
        cfg.model.decoder.kind = self.decoder;
        cfg.meta.mode = self.training;
        cfg
    }

    pub fn with_prompt(self, prompt: PromptMode) -> Self {
        Self { prompt, ..self }
    }

    pub fn with_decoder(self, decoder: DecoderKind) -> Self {
        Self { decoder, ..self }
    }

    pub fn with_training(self, training: TrainMode) -> Self {
        Self { training, ..self }
    }
}

fn prompt_tag(p: PromptMode) -> &'static str {
    match p {
        PromptMode::SelfSampling => "ss",
        PromptMode::Positional => "pe",
        PromptMode::None => "none",
    }
}

fn decoder_tag(d: DecoderKind) -> &'static str {
    match d {
        DecoderKind::Fmad => "fmad",
        DecoderKind::Plain => "plain",
    }
}

fn training_tag(t: TrainMode) -> &'static str {
    match t {
        TrainMode::Meta => "meta",
        TrainMode::FineTune => "finetune",
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}",
            prompt_tag(self.prompt),
            decoder_tag(self.decoder),
            training_tag(self.training)
        )
    }
}

pub fn parse_prompt(s: &str) -> Result<PromptMode> {
    match s {
        "ss" | "self_sampling" => Ok(PromptMode::SelfSampling),
        "pe" | "positional" => Ok(PromptMode::Positional),
        "none" => Ok(PromptMode::None),
        _ => Err(Error::Config(format!("unknown prompt toggle `{s}` (ss, pe, none)"))),
    }
}

pub fn parse_decoder(s: &str) -> Result<DecoderKind> {
    match s {
        "fmad" => Ok(DecoderKind::Fmad),
        "plain" => Ok(DecoderKind::Plain),
        _ => Err(Error::Config(format!("unknown decoder toggle `{s}` (fmad, plain)"))),
    }
}

pub fn parse_training(s: &str) -> Result<TrainMode> {
    match s {
        "meta" => Ok(TrainMode::Meta),
        "finetune" | "fine_tune" => Ok(TrainMode::FineTune),
        _ => Err(Error::Config(format!("unknown training toggle `{s}` (meta, finetune)"))),
    }
}

/// Parses `prompt-decoder-training`, e.g. `ss-fmad-meta`.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let [p, d, t] = parts.as_slice() else {
            return Err(Error::Config(format!("variant `{s}` must look like `ss-fmad-meta`")));
        };
        Ok(Variant {
            prompt: parse_prompt(p)?,
            decoder: parse_decoder(d)?,
            training: parse_training(t)?,
        })
    }
}

/// Every combination of prompt mode, decoder and training mode.
pub fn all_variants() -> Vec<Variant> {
    let mut out = Vec::with_capacity(12);
    for prompt in [PromptMode::SelfSampling, PromptMode::Positional, PromptMode::None] {
        for decoder in [DecoderKind::Fmad, DecoderKind::Plain] {
            for training in [TrainMode::Meta, TrainMode::FineTune] {
                out.push(Variant {
                    prompt,
                    decoder,
                    training,
                });
            }
        }
    }
    out
}

/// Configurations for every variant, derived from `base`.
pub fn ablation_toggles(base: &Config) -> Vec<(Variant, Config)> {
    all_variants().into_iter().map(|v| (v, v.apply(base))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in all_variants() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(all_variants().len(), 12);
    }

    #[test]
    fn unknown_toggle_is_a_config_error() {
        assert!(matches!("ss-fmad-maml".parse::<Variant>(), Err(Error::Config(_))));
        assert!(matches!("xx-fmad-meta".parse::<Variant>(), Err(Error::Config(_))));
        assert!(matches!("ss-fmad".parse::<Variant>(), Err(Error::Config(_))));
    }
}
