//! Per-task online adaptation: plain gradient descent over a few labeled pairs.

use metaseg_autodiff::{Dual, Tape, Tensor};

use crate::config::{ModelConfig, PromptMode};
use crate::error::{Error, Result};
use crate::metaopt::loss::{pair_loss_on, LossReport};
use crate::model::Pair;
use crate::params::{ensure_finite, GradMap, ParamSet};
use crate::prompt::{prompt_for, PointPrompt};

/// A labeled pair with the training prompt it is always shown with.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub pair: Pair,
    pub prompt: Option<PointPrompt>,
}

/// Draws one training prompt per pair from its own mask. Prompt-free models
/// get `None`.
pub fn make_shots(cfg: &ModelConfig, pairs: &[Pair], seed: u64, path: &[u64]) -> Result<Vec<Shot>> {
    pairs
        .iter()
        .enumerate()
        .map(|(k, pair)| {
            let prompt = match cfg.prompt.mode {
                PromptMode::None => None,
                _ => {
                    let mut p = path.to_vec();
                    p.push(k as u64);
                    Some(prompt_for(&pair.mask, cfg, true, seed, &p)?)
                }
            };
            Ok(Shot {
                pair: pair.clone(),
                prompt,
            })
        })
        .collect()
}

pub fn shot_loss(cfg: &ModelConfig, params: &ParamSet, shot: &Shot) -> Result<LossReport> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let vars = pair_loss_on(&mut tape, &b, cfg, &shot.pair, shot.prompt.as_ref())?;
    Ok(vars.report(&tape))
}

pub fn shot_grad(cfg: &ModelConfig, params: &ParamSet, shot: &Shot) -> Result<(LossReport, GradMap)> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let vars = pair_loss_on(&mut tape, &b, cfg, &shot.pair, shot.prompt.as_ref())?;
    let grads = tape.backward(vars.total)?;
    Ok((vars.report(&tape), b.collect(&grads, Tensor::to_f64)))
}

/// Hessian of one shot's loss applied to `v`, by forward-over-reverse.
pub fn shot_hvp(cfg: &ModelConfig, params: &ParamSet, shot: &Shot, v: &GradMap) -> Result<GradMap> {
    let mut tape = Tape::<Dual>::new();
    let b = params.bind(&mut tape, Some(v));
    let vars = pair_loss_on(&mut tape, &b, cfg, &shot.pair, shot.prompt.as_ref())?;
    let grads = tape.backward(vars.total)?;
    Ok(b.collect(&grads, Tensor::tangents))
}

/// Mean loss over the shots.
pub fn mean_loss(cfg: &ModelConfig, params: &ParamSet, shots: &[Shot]) -> Result<LossReport> {
    let reports = shots
        .iter()
        .map(|s| shot_loss(cfg, params, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// Mean loss and its gradient over the shots.
pub fn mean_grad(cfg: &ModelConfig, params: &ParamSet, shots: &[Shot]) -> Result<(LossReport, GradMap)> {
    if shots.is_empty() {
        return Err(Error::Task("no pairs to evaluate".into()));
    }
    let k = 1.0 / shots.len() as f64;
    let mut reports = Vec::with_capacity(shots.len());
    let mut acc = GradMap::new();
    for s in shots {
        let (r, g) = shot_grad(cfg, params, s)?;
        reports.push(r);
        crate::params::axpy(&mut acc, k, &g)?;
    }
    Ok((LossReport::mean(&reports), acc))
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub params: ParamSet,
    /// Loss of each step, measured before its update; `S·K` entries.
    pub trace: Vec<LossReport>,
    /// Parameters before each step, kept only when recording.
    pub history: Vec<ParamSet>,
}

/// `S` sweeps over the shots, one SGD step of rate `alpha` per shot on the
/// trainable tensors. `theta` is left untouched.
pub fn online_optimize(
    cfg: &ModelConfig,
    theta: &ParamSet,
    shots: &[Shot],
    steps: usize,
    alpha: f64,
) -> Result<Adapted> {
    run(cfg, theta, shots, steps, alpha, false)
}

pub(crate) fn run(
    cfg: &ModelConfig,
    theta: &ParamSet,
    shots: &[Shot],
    steps: usize,
    alpha: f64,
    record: bool,
) -> Result<Adapted> {
    if shots.is_empty() {
        return Err(Error::Task("online optimization needs at least one pair".into()));
    }
    let mut params = theta.clone();
    let mut trace = Vec::with_capacity(steps * shots.len());
    let mut history = Vec::new();
    for s in 0..steps {
        for (k, shot) in shots.iter().enumerate() {
            let (r, g) = shot_grad(cfg, &params, shot)?;
            ensure_finite(&g, &format!("online step {s}, pair {k}"))?;
            if !r.total.is_finite() {
                return Err(Error::Tensor(metaseg_autodiff::Error::NonFinite {
                    stage: format!("online step {s}, pair {k}: loss"),
                }));
            }
            trace.push(r);
            if record {
                history.push(params.clone());
            }
            params.sgd_step(&g, alpha)?;
        }
    }
    Ok(Adapted { params, trace, history })
}
