//! Balanced cross-entropy plus soft IoU.

use metaseg_autodiff::{kernels, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Episode, Mask};
use crate::error::{Error, Result};
use crate::model::{forward_on, Pair};
use crate::params::{Bound, ParamSet};
use crate::prompt::{prompt_for, PointPrompt};

pub const IOU_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub bce: f64,
    pub iou: f64,
}

impl LossReport {
    pub fn new(bce: f64, iou: f64) -> Self {
        Self {
            total: bce + iou,
            bce,
            iou,
        }
    }

    /// Componentwise mean; `total` stays the sum of the averaged parts.
    pub fn mean(items: &[LossReport]) -> Self {
        let n = items.len().max(1) as f64;
        let bce = items.iter().map(|r| r.bce).sum::<f64>() / n;
        let iou = items.iter().map(|r| r.iou).sum::<f64>() / n;
        Self::new(bce, iou)
    }
}

/// Class weights `(w_pos, w_neg) = (N_neg/N, N_pos/N)`.
pub fn class_weights(target: &Mask) -> (f64, f64) {
    let n = target.data().len() as f64;
    let pos = target.count() as f64;
    ((n - pos) / n, pos / n)
}

fn check_shape(logits: &[usize], target: &Mask) -> Result<()> {
    let (h, w) = target.shape();
    if logits != [h, w] {
        return Err(Error::Tensor(metaseg_autodiff::Error::Dimension {
            op: "loss",
            lhs: logits.to_vec(),
            rhs: vec![h, w],
        }));
    }
    Ok(())
}

/// Mean of `w·(softplus(z) − g·z)` with inverse-frequency class weights.
pub fn balanced_bce_on<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Mask) -> Result<Var> {
    check_shape(tape.shape(logits), target)?;
    let (wp, wn) = class_weights(target);
    let g = tape.constant(target.to_tensor().lift(None));
    let weights = target.to_tensor().map(|v| if v == 1.0 { wp } else { wn });
    let wv = tape.constant(weights.lift(None));
    let sp = tape.softplus(logits);
    let gz = tape.mul(g, logits)?;
    let bce = tape.sub(sp, gz)?;
    let weighted = tape.mul(wv, bce)?;
    Ok(tape.mean(weighted))
}

/// `1 − (Σp·g + ε)/(Σp + Σg − Σp·g + ε)` with `p = sigmoid(z)`.
pub fn iou_loss_on<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Mask) -> Result<Var> {
    check_shape(tape.shape(logits), target)?;
    let g = tape.constant(target.to_tensor().lift(None));
    let p = tape.sigmoid(logits);
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg);
    let sp = tape.sum(p);
    let union = tape.add_scalar(sp, target.count() as f64);
    let union = tape.sub(union, inter)?;
    let num = tape.add_scalar(inter, IOU_EPS);
    let den = tape.add_scalar(union, IOU_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

pub fn balanced_bce(logits: &Tensor, target: &Mask) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(logits.clone());
    let l = balanced_bce_on(&mut tape, z, target)?;
    Ok(tape.value(l).item())
}

pub fn iou_loss(logits: &Tensor, target: &Mask) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(logits.clone());
    let l = iou_loss_on(&mut tape, z, target)?;
    Ok(tape.value(l).item())
}

/// Vars of one pair's loss: `(total, bce, iou)`.
pub struct LossVars {
    pub total: Var,
    pub bce: Var,
    pub iou: Var,
}

impl LossVars {
    pub fn report<T: Real>(&self, tape: &Tape<T>) -> LossReport {
        let bce = tape.value(self.bce).item().re();
        let iou = tape.value(self.iou).item().re();
        LossReport {
            total: tape.value(self.total).item().re(),
            bce,
            iou,
        }
    }
}

pub fn pair_loss_on<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    pair: &Pair,
    prompt: Option<&PointPrompt>,
) -> Result<LossVars> {
    let logits = forward_on(tape, b, cfg, &pair.image, &pair.support, prompt)?;
    let bce = balanced_bce_on(tape, logits, &pair.mask)?;
    let iou = iou_loss_on(tape, logits, &pair.mask)?;
    let total = tape.add(bce, iou)?;
    Ok(LossVars { total, bce, iou })
}

/// Loss of the full model on an episode, averaged over its query slices.
/// Training prompts are drawn from each query's own mask; queries whose
/// mask is empty are skipped.
pub fn episode_loss(cfg: &ModelConfig, params: &ParamSet, ep: &Episode, seed: u64) -> Result<LossReport> {
    let mut reports = Vec::new();
    for (qi, pair) in Pair::from_episode(ep).iter().enumerate() {
        if pair.mask.is_empty() {
            tracing::warn!(organ = %ep.organ, chunk = ep.chunk, query = qi, "skipping empty query");
            continue;
        }
        let prompt = prompt_for(&pair.mask, cfg, true, seed, &[ep.chunk as u64, qi as u64])?;
        let mut tape = Tape::<f64>::new();
        let b = params.bind(&mut tape, None);
        let vars = pair_loss_on(&mut tape, &b, cfg, pair, Some(&prompt))?;
        reports.push(vars.report(&tape));
    }
    if reports.is_empty() {
        return Err(Error::Task(format!(
            "episode for `{}` chunk {} has no query with foreground",
            ep.organ, ep.chunk
        )));
    }
    Ok(LossReport::mean(&reports))
}

/// Independent per-pixel evaluation, used to cross-check the tape losses.
pub fn reference_losses(logits: &Tensor, target: &Mask) -> (f64, f64) {
    let (wp, wn) = class_weights(target);
    let n = logits.len() as f64;
    let (mut bce, mut inter, mut sp) = (0.0, 0.0, 0.0);
    for (&z, &g) in logits.data().iter().zip(target.data()) {
        let g = g as f64;
        let w = if g == 1.0 { wp } else { wn };
        bce += w * (kernels::softplus(z) - g * z);
        let p = kernels::sigmoid(z);
        inter += p * g;
        sp += p;
    }
    let union = sp + target.count() as f64 - inter;
    (bce / n, 1.0 - (inter + IOU_EPS) / (union + IOU_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half() -> Mask {
        Mask::new(2, 2, vec![1, 0, 1, 0]).unwrap()
    }

    #[test]
    fn perfect_prediction_has_tiny_bce() {
        let g = half();
        let z = g.to_tensor().map(|v| if v == 1.0 { 50.0 } else { -50.0 });
        assert!(balanced_bce(&z, &g).unwrap() < 1e-10);
    }

    #[test]
    fn zero_logits_balanced_target() {
        let v = balanced_bce(&Tensor::zeros([2, 2]), &half()).unwrap();
        assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_background_target() {
        let g = Mask::empty(2, 2);
        assert!(balanced_bce(&Tensor::full([2, 2], -50.0), &g).unwrap() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let g = half();
        let exact = g.to_tensor().map(|v| if v == 1.0 { 40.0 } else { -40.0 });
        assert!(iou_loss(&exact, &g).unwrap() < 1e-9);
        let complement = exact.map(|v| -v);
        assert!((iou_loss(&complement, &g).unwrap() - 1.0).abs() < 1e-6);
        // p = ½ everywhere: 1 − (1+ε)/(2+2−1+ε)
        let v = iou_loss(&Tensor::zeros([2, 2]), &g).unwrap();
        let expected = 1.0 - (1.0 + IOU_EPS) / (3.0 + IOU_EPS);
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_match_reference() {
        let mut rng = crate::rng::stream(1, &[]);
        let z = Tensor::randn([5, 7], 2.0, &mut rng);
        let g = Mask::from_fn(5, 7, |i, j| (i * 7 + j) % 3 == 0);
        let (b, i) = reference_losses(&z, &g);
        assert!((balanced_bce(&z, &g).unwrap() - b).abs() < 1e-12);
        assert!((iou_loss(&z, &g).unwrap() - i).abs() < 1e-12);
    }
}
