//! Point prompts and the self-sampling prompt encoder.
//!
//! Points are lifted into the embedding space by bilinear interpolation of
//! the first-level map, tagged with a positive/negative role vector, and
//! mixed with learnable global queries by one self-attention block. Image
//! tokens then attend to the updated queries (one cross-attention block with
//! an additive residual), which rewrites the first-level embedding.
//!
//! The positional variant replaces interpolation with fixed sinusoidal
//! features of the coordinates and adds the same encoding to the image-token
//! queries of the cross-attention.

use std::f64::consts::PI;

use metaseg_autodiff::{Real, Tape, Tensor, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PromptMode};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet, Tag};
use crate::rng::{purpose_stream, Purpose, Rng};

pub const QUERIES: &str = "prompt.queries";
pub const ROLE: &str = "prompt.role";
pub const PE_PROJ: &str = "prompt.pe.proj";
const LN_EPS: f64 = 1e-5;

/// Normalized point coordinates; `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointPrompt {
    pub positives: Vec<[f64; 2]>,
    pub negatives: Vec<[f64; 2]>,
}

fn sort_points(p: &mut [[f64; 2]]) {
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
}

impl PointPrompt {
    pub fn new(positives: Vec<[f64; 2]>, negatives: Vec<[f64; 2]>) -> Result<Self> {
        let p = Self { positives, negatives };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::Task("a prompt needs at least one positive point".into()));
        }
        for &[x, y] in self.positives.iter().chain(&self.negatives) {
            for v in [x, y] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Tensor(metaseg_autodiff::Error::Range {
                        op: "point prompt",
                        value: v,
                        expected: "[0, 1]",
                    }));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points sorted within each sign class, positives first, with role indices.
    pub fn canonical(&self) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut pos = self.positives.clone();
        let mut neg = self.negatives.clone();
        sort_points(&mut pos);
        sort_points(&mut neg);
        let roles = std::iter::repeat_n(0, pos.len())
            .chain(std::iter::repeat_n(1, neg.len()))
            .collect();
        pos.extend(neg);
        (pos, roles)
    }
}

/// Chamfer distance to the nearest background pixel (the frame counts as
/// background). Foreground pixels get values ≥ 1, background 0.
pub fn depth_map(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let inf = f64::INFINITY;
    let mut d: Vec<f64> = mask.data().iter().map(|&m| if m == 1 { inf } else { 0.0 }).collect();
    let diag = std::f64::consts::SQRT_2;
    let at = |d: &Vec<f64>, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            d[i as usize * w + j as usize]
        }
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let k = i as usize * w + j as usize;
            if d[k] == 0.0 {
                continue;
            }
            let best = [
                at(&d, i - 1, j) + 1.0,
                at(&d, i, j - 1) + 1.0,
                at(&d, i - 1, j - 1) + diag,
                at(&d, i - 1, j + 1) + diag,
            ];
            d[k] = best.iter().fold(d[k], |a, &b| a.min(b));
        }
    }
    for i in (0..h as isize).rev() {
        for j in (0..w as isize).rev() {
            let k = i as usize * w + j as usize;
            if d[k] == 0.0 {
                continue;
            }
            let best = [
                at(&d, i + 1, j) + 1.0,
                at(&d, i, j + 1) + 1.0,
                at(&d, i + 1, j + 1) + diag,
                at(&d, i + 1, j - 1) + diag,
            ];
            d[k] = best.iter().fold(d[k], |a, &b| a.min(b));
        }
    }
    d
}

fn pixel_center(k: usize, h: usize, w: usize) -> [f64; 2] {
    [((k % w) as f64 + 0.5) / w as f64, ((k / w) as f64 + 0.5) / h as f64]
}

/// Draws `k_pos` distinct foreground points weighted by depth and `k_neg`
/// distinct background points uniformly, as normalized pixel centres.
///
/// An empty foreground is a task error. Requests beyond the available pixel
/// count are reduced with a warning.
pub fn sample_points(mask: &Mask, k_pos: usize, k_neg: usize, rng: &mut Rng) -> Result<PointPrompt> {
    if k_pos == 0 {
        return Err(Error::Task("k_pos must be at least 1".into()));
    }
    let (h, w) = mask.shape();
    let fg: Vec<usize> = (0..h * w).filter(|&k| mask.data()[k] == 1).collect();
    let bg: Vec<usize> = (0..h * w).filter(|&k| mask.data()[k] == 0).collect();
    if fg.is_empty() {
        return Err(Error::Task("cannot prompt an empty mask".into()));
    }
    let depth = depth_map(mask);
    let kp = k_pos.min(fg.len());
    let kn = k_neg.min(bg.len());
    if kp < k_pos || kn < k_neg {
        tracing::warn!(k_pos, k_neg, kp, kn, "reduced prompt size to available pixels");
    }
    let picked = index::sample_weighted(rng, fg.len(), |i| depth[fg[i]], kp)
        .map_err(|e| Error::Task(format!("positive sampling failed: {e}")))?;
    let positives = picked.iter().map(|i| pixel_center(fg[i], h, w)).collect();
    let negatives = index::sample(rng, bg.len(), kn)
        .iter()
        .map(|i| pixel_center(bg[i], h, w))
        .collect();
    Ok(PointPrompt { positives, negatives })
}

/// Training prompts use the configured counts; evaluation uses the smaller ones.
pub fn prompt_for(mask: &Mask, cfg: &ModelConfig, training: bool, seed: u64, path: &[u64]) -> Result<PointPrompt> {
    let p = &cfg.prompt;
    let (kp, kn) = if training {
        (p.train_pos, p.train_neg)
    } else {
        (p.eval_pos, p.eval_neg)
    };
    sample_points(mask, kp, kn, &mut purpose_stream(seed, Purpose::Prompt, path))
}

fn attn_name(block: &str, part: &str) -> String {
    format!("prompt.{block}.{part}")
}

/// Prompt-bank parameters for the configured mode (none for `PromptMode::None`).
pub fn init_prompt(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    if cfg.prompt.mode == PromptMode::None {
        return Ok(ps);
    }
    let mut rng = purpose_stream(seed, Purpose::Init, &[2]);
    let d = cfg.encoder.embed_dim;
    let std = crate::encoder::PROJ_STD;
    let tr = Tag::Trainable;
    ps.insert(
        QUERIES,
        Tensor::trunc_normal([cfg.prompt.n_queries, d], 1.0, &mut rng),
        tr,
    )?;
    ps.insert(ROLE, Tensor::trunc_normal([2, d], 1.0, &mut rng), tr)?;
    for blk in ["sa", "ca"] {
        for part in ["q", "k", "v", "o"] {
            ps.insert(attn_name(blk, part), Tensor::trunc_normal([d, d], std, &mut rng), tr)?;
        }
        ps.insert(attn_name(blk, "ln.g"), Tensor::ones([d]), tr)?;
        ps.insert(attn_name(blk, "ln.b"), Tensor::zeros([d]), tr)?;
    }
    if cfg.prompt.mode == PromptMode::Positional {
        let f = 4 * cfg.prompt.pe_freqs;
        let pstd = 1.0 / (f as f64).sqrt();
        ps.insert(PE_PROJ, Tensor::trunc_normal([f, d], pstd, &mut rng), tr)?;
    }
    Ok(ps)
}

/// Sinusoidal features `[p × 4F]` of normalized points.
pub fn pe_features(points: &[[f64; 2]], freqs: usize) -> Tensor {
    let f = 4 * freqs;
    Tensor::from_fn([points.len(), f], |k| {
        let ([x, y], j) = (points[k / f], k % f);
        let (band, which) = (j / 4, j % 4);
        let w = PI * (1u64 << band) as f64;
        match which {
            0 => (w * x).sin(),
            1 => (w * x).cos(),
            2 => (w * y).sin(),
            _ => (w * y).cos(),
        }
    })
}

/// Align-corners coordinates of the token grid, row-major.
fn grid_points(g: usize) -> Vec<[f64; 2]> {
    let c = |t: usize| if g > 1 { t as f64 / (g - 1) as f64 } else { 0.0 };
    (0..g * g).map(|k| [c(k % g), c(k / g)]).collect()
}

/// `softmax(q kᵀ/√d) v Wo` with projections from block `blk`.
fn attend<T: Real>(tape: &mut Tape<T>, b: &Bound, blk: &str, xq: Var, xkv: Var, d: usize) -> Result<Var> {
    let q = tape.matmul(xq, b.var(&attn_name(blk, "q"))?)?;
    let k = tape.matmul(xkv, b.var(&attn_name(blk, "k"))?)?;
    let v = tape.matmul(xkv, b.var(&attn_name(blk, "v"))?)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let a = tape.softmax_rows(s)?;
    let av = tape.matmul(a, v)?;
    Ok(tape.matmul(av, b.var(&attn_name(blk, "o"))?)?)
}

fn ln<T: Real>(tape: &mut Tape<T>, b: &Bound, blk: &str, x: Var) -> Result<Var> {
    let g = b.var(&attn_name(blk, "ln.g"))?;
    let beta = b.var(&attn_name(blk, "ln.b"))?;
    Ok(tape.layer_norm(x, g, beta, LN_EPS)?)
}

/// Rewrites the first-level embedding `z[d×h×w]` with the prompt. Returns
/// `z` unchanged in `PromptMode::None`.
pub fn self_sample_on<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    z: Var,
    prompt: &PointPrompt,
) -> Result<Var> {
    let mode = cfg.prompt.mode;
    if mode == PromptMode::None {
        return Ok(z);
    }
    prompt.validate()?;
    let (d, h, w) = tape.value(z).dims3("self_sample")?;
    if d != cfg.encoder.embed_dim {
        return Err(Error::Tensor(metaseg_autodiff::Error::Contract(format!(
            "embedding has {d} channels, prompt bank expects {}",
            cfg.encoder.embed_dim
        ))));
    }
    let (points, roles) = prompt.canonical();
    let visual = match mode {
        PromptMode::SelfSampling => tape.bilinear_sample(z, &points)?,
        _ => {
            let f = tape.constant(pe_features(&points, cfg.prompt.pe_freqs).lift(None));
            tape.matmul(f, b.var(PE_PROJ)?)?
        }
    };
    let role = tape.gather_rows(b.var(ROLE)?, &roles)?;
    let visual = tape.add(visual, role)?;
    let tokens = tape.concat_rows(&[b.var(QUERIES)?, visual])?;

    let sa = attend(tape, b, "sa", tokens, tokens, d)?;
    let tokens = tape.add(tokens, sa)?;
    let tokens = ln(tape, b, "sa", tokens)?;
    let queries = tape.slice_rows(tokens, 0, cfg.prompt.n_queries)?;

    let flat = tape.reshape(z, &[d, h * w])?;
    let x = tape.transpose(flat)?;
    let mut xn = ln(tape, b, "ca", x)?;
    if mode == PromptMode::Positional && h == w {
        let f = tape.constant(pe_features(&grid_points(h), cfg.prompt.pe_freqs).lift(None));
        let pe = tape.matmul(f, b.var(PE_PROJ)?)?;
        xn = tape.add(xn, pe)?;
    }
    let ca = attend(tape, b, "ca", xn, queries, d)?;
    let x = tape.add(x, ca)?;
    let t = tape.transpose(x)?;
    Ok(tape.reshape(t, &[d, h, w])?)
}

/// Value-level convenience around [`self_sample_on`].
pub fn self_sample(cfg: &ModelConfig, params: &ParamSet, z: &Tensor, prompt: &PointPrompt) -> Result<Tensor> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let zv = tape.constant(z.clone());
    let out = self_sample_on(&mut tape, &b, cfg, zv, prompt)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use crate::rng::stream;

    fn cfg(mode: PromptMode) -> ModelConfig {
        let mut c = ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                embed_dim: 8,
                n_layers: 4,
                n_heads: 2,
                adapter_hidden: 3,
            },
            ..ModelConfig::default()
        };
        c.prompt.mode = mode;
        c
    }

    fn disk(size: usize, r: f64) -> Mask {
        let c = (size as f64 - 1.0) / 2.0;
        Mask::from_fn(size, size, |i, j| {
            ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() <= r
        })
    }

    #[test]
    fn all_foreground_gives_no_negatives() {
        let m = Mask::from_fn(6, 6, |_, _| true);
        let p = sample_points(&m, 3, 0, &mut stream(0, &[])).unwrap();
        assert!(p.negatives.is_empty());
        assert_eq!(p.positives.len(), 3);
    }

    #[test]
    fn single_pixel_is_forced() {
        let m = Mask::from_fn(4, 5, |i, j| i == 2 && j == 3);
        let p = sample_points(&m, 1, 2, &mut stream(0, &[])).unwrap();
        assert_eq!(p.positives, vec![[3.5 / 5.0, 2.5 / 4.0]]);
        for &[x, y] in &p.negatives {
            let (j, i) = ((x * 5.0) as usize, (y * 4.0) as usize);
            assert!(!m.get(i, j));
        }
    }

    #[test]
    fn empty_mask_is_a_task_error() {
        let m = Mask::empty(4, 4);
        assert!(matches!(
            sample_points(&m, 1, 1, &mut stream(0, &[])),
            Err(Error::Task(_))
        ));
    }

    #[test]
    fn negatives_are_reduced_to_background_size() {
        let m = Mask::from_fn(2, 2, |i, j| i + j > 0);
        let p = sample_points(&m, 1, 5, &mut stream(0, &[])).unwrap();
        assert_eq!(p.negatives.len(), 1);
    }

    #[test]
    fn depth_of_disk_peaks_at_centre() {
        let m = disk(15, 6.0);
        let d = depth_map(&m);
        let centre = 7 * 15 + 7;
        assert!(d.iter().all(|&v| v <= d[centre]));
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn zero_cross_output_is_identity() {
        let c = cfg(PromptMode::SelfSampling);
        let mut ps = init_prompt(&c, 0).unwrap();
        ps.set("prompt.ca.o", Tensor::zeros([8, 8])).unwrap();
        let z = Tensor::randn([8, 4, 4], 1.0, &mut stream(1, &[]));
        let p = PointPrompt::new(vec![[0.5, 0.5]], vec![]).unwrap();
        assert_eq!(self_sample(&c, &ps, &z, &p).unwrap(), z);
    }

    #[test]
    fn positive_order_does_not_matter() {
        for mode in [PromptMode::SelfSampling, PromptMode::Positional] {
            let c = cfg(mode);
            let ps = init_prompt(&c, 3).unwrap();
            let z = Tensor::randn([8, 4, 4], 1.0, &mut stream(2, &[]));
            let a = PointPrompt::new(vec![[0.1, 0.2], [0.7, 0.4]], vec![[0.9, 0.9]]).unwrap();
            let b = PointPrompt::new(vec![[0.7, 0.4], [0.1, 0.2]], vec![[0.9, 0.9]]).unwrap();
            assert_eq!(
                self_sample(&c, &ps, &z, &a).unwrap(),
                self_sample(&c, &ps, &z, &b).unwrap()
            );
        }
    }

    #[test]
    fn no_prompt_mode_is_passthrough() {
        let c = cfg(PromptMode::None);
        let ps = init_prompt(&c, 0).unwrap();
        assert!(ps.is_empty());
        let z = Tensor::randn([8, 4, 4], 1.0, &mut stream(1, &[]));
        let p = PointPrompt::new(vec![[0.5, 0.5]], vec![]).unwrap();
        assert_eq!(self_sample(&c, &ps, &z, &p).unwrap(), z);
    }

    #[test]
    fn pe_features_at_origin() {
        let f = pe_features(&[[0.0, 0.0]], 2);
        assert_eq!(f.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn sampled_points_respect_the_mask(bits in proptest::collection::vec(0u8..2, 48), kp in 1usize..5, kn in 0usize..5, seed in 0u64..1000) {
            let mut bits = bits;
            bits[0] = 1;
            let m = Mask::new(6, 8, bits).unwrap();
            let p = sample_points(&m, kp, kn, &mut stream(seed, &[])).unwrap();
            let at = |q: &[f64; 2]| m.get((q[1] * 6.0) as usize, (q[0] * 8.0) as usize);
            proptest::prop_assert_eq!(p.positives.len(), kp.min(m.count()));
            proptest::prop_assert_eq!(p.negatives.len(), kn.min(48 - m.count()));
            proptest::prop_assert!(p.positives.iter().all(at));
            proptest::prop_assert!(!p.negatives.iter().any(at));
            for (i, q) in p.positives.iter().enumerate() {
                proptest::prop_assert!(!p.positives[..i].contains(q));
            }
        }
    }
}
