//! Full segmentation model: encoder, prompt module, decoder.

use metaseg_autodiff::{Real, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::data::{Episode, Mask};
use crate::encoder::{encode_on, init_encoder};
use crate::error::Result;
use crate::fmad::{decode_on, init_decoder, predict_mask, prepare_support_mask};
use crate::params::{Bound, ParamSet};
use crate::prompt::{init_prompt, self_sample_on, PointPrompt};

/// A query slice with its ground truth and the support mask that conditions it.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image: Tensor,
    pub mask: Mask,
    pub support: Mask,
}

impl Pair {
    /// One pair per query of the episode.
    pub fn from_episode(ep: &Episode) -> Vec<Pair> {
        ep.queries
            .iter()
            .map(|q| Pair {
                image: q.image.clone(),
                mask: q.mask.clone(),
                support: ep.support.mask.clone(),
            })
            .collect()
    }
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let mut ps = init_encoder(&cfg.encoder, seed)?;
    ps.extend(init_prompt(cfg, seed)?)?;
    ps.extend(init_decoder(cfg, seed)?)?;
    Ok(ps)
}

/// Records a forward pass; returns `[H×W]` logits. Without a prompt the
/// first-level embedding passes through untouched.
pub fn forward_on<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    image: &Tensor,
    support: &Mask,
    prompt: Option<&PointPrompt>,
) -> Result<Var> {
    let mut levels = encode_on(tape, b, &cfg.encoder, image)?;
    if let Some(p) = prompt {
        levels[0] = self_sample_on(tape, b, cfg, levels[0], p)?;
    }
    let g = cfg.encoder.grid();
    let mp = prepare_support_mask(support, g, g, cfg.encoder.embed_dim, cfg.decoder.sigma)?;
    decode_on(tape, b, cfg, &levels, &mp)
}

pub fn predict_logits(
    cfg: &ModelConfig,
    params: &ParamSet,
    image: &Tensor,
    support: &Mask,
    prompt: Option<&PointPrompt>,
) -> Result<Tensor> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let out = forward_on(&mut tape, &b, cfg, image, support, prompt)?;
    Ok(tape.value(out).clone())
}

pub fn segment(
    cfg: &ModelConfig,
    params: &ParamSet,
    image: &Tensor,
    support: &Mask,
    prompt: Option<&PointPrompt>,
) -> Result<Mask> {
    predict_mask(&predict_logits(cfg, params, image, support, prompt)?, 0.5)
}
