//! Evaluation with single-click prompts.

use crate::config::{ModelConfig, PromptMode};
use crate::data::{dsc, make_episodes, ChunkedVolume};
use crate::error::Result;
use crate::metaopt::online::Shot;
use crate::model::{segment, Pair};
use crate::prompt::sample_points;
use crate::rng::{purpose_stream, Purpose};

/// Query pairs of every episode of `organ`, skipping empty query masks.
pub fn query_pairs(volumes: &[ChunkedVolume], organ: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for v in volumes {
        for ep in make_episodes(v, organ)?.episodes {
            out.extend(Pair::from_episode(&ep).into_iter().filter(|p| !p.mask.is_empty()));
        }
    }
    Ok(out)
}

/// Attaches the evaluation prompt (by default a single positive click drawn
/// from the query's own mask) to each pair.
pub fn eval_shots(cfg: &ModelConfig, pairs: &[Pair], seed: u64) -> Result<Vec<Shot>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let prompt = match cfg.prompt.mode {
                PromptMode::None => None,
                _ => {
                    let mut rng = purpose_stream(seed, Purpose::Eval, &[i as u64]);
                    Some(sample_points(
                        &pair.mask,
                        cfg.prompt.eval_pos,
                        cfg.prompt.eval_neg,
                        &mut rng,
                    )?)
                }
            };
            Ok(Shot {
                pair: pair.clone(),
                prompt,
            })
        })
        .collect()
}

/// Dice of each thresholded prediction against its ground truth.
pub fn dsc_scores(cfg: &ModelConfig, params: &crate::params::ParamSet, queries: &[Shot]) -> Result<Vec<f64>> {
    queries
        .iter()
        .map(|q| {
            let pred = segment(cfg, params, &q.pair.image, &q.pair.support, q.prompt.as_ref())?;
            dsc(&pred, &q.pair.mask)
        })
        .collect()
}

pub fn mean_dsc(cfg: &ModelConfig, params: &crate::params::ParamSet, queries: &[Shot]) -> Result<f64> {
    let s = dsc_scores(cfg, params, queries)?;
    Ok(s.iter().sum::<f64>() / s.len().max(1) as f64)
}
