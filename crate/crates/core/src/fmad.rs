//! Mask attention module and the four-level decoder.
//!
//! With `M′` the blurred support mask repeated over channels:
//!
//! ```text
//! K  = (M′ ⊙ F) W_K       Q = F W_Q        V = M′ W_V
//! A  = softmax_col(Q̄ K̄ᵀ / τ)              (Q̄, K̄ row-normalized, A is N×N)
//! F′ = InsNorm((A V) ⊙ F)
//! ```
//!
//! Each level passes through its own module, a 3×3 convolution and GELU,
//! is upsampled to image resolution, and the concatenated levels are fused
//! by one more convolution into a single logit channel.

use metaseg_autodiff::gradcheck::{finite_diff_check, OpCheck};
use metaseg_autodiff::kernels::{blur_plane, gaussian_kernel};
use metaseg_autodiff::{Real, Resize, Tape, Tensor, Var};

use crate::config::{DecoderKind, ModelConfig};
use crate::data::Mask;
use crate::encoder::{MultiLevelEmbedding, PROJ_STD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet, Tag};
use crate::rng::{purpose_stream, Purpose};

pub const INS_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;
pub const FUSE_W: &str = "dec.fuse.w";
pub const FUSE_B: &str = "dec.fuse.b";

pub fn level_name(l: usize, part: &str) -> String {
    format!("dec.l{l}.{part}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmamWeights {
    pub wk: Tensor,
    pub wq: Tensor,
    pub wv: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub tau: f64,
}

impl FmamWeights {
    pub fn identity(c: usize, tau: f64) -> Self {
        let eye = Tensor::from_fn([c, c], |k| (k / c == k % c) as u8 as f64);
        Self {
            wk: eye.clone(),
            wq: eye.clone(),
            wv: eye,
            gamma: Tensor::ones([c]),
            beta: Tensor::zeros([c]),
            tau,
        }
    }

    pub fn from_params(params: &ParamSet, level: usize, tau: f64) -> Result<Self> {
        let get = |p: &str| params.tensor(&level_name(level, p)).cloned();
        Ok(Self {
            wk: get("wk")?,
            wq: get("wq")?,
            wv: get("wv")?,
            gamma: get("in.g")?,
            beta: get("in.b")?,
            tau,
        })
    }
}

pub fn init_decoder(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = purpose_stream(seed, Purpose::Init, &[3]);
    let c = cfg.encoder.embed_dim;
    let tr = Tag::Trainable;
    let mut ps = ParamSet::new();
    for l in 0..4 {
        if cfg.decoder.kind == DecoderKind::Fmad {
            for part in ["wk", "wq", "wv"] {
                let noise = Tensor::trunc_normal([c, c], PROJ_STD, &mut rng);
                let w = Tensor::from_fn([c, c], |k| noise.data()[k] + (k / c == k % c) as u8 as f64);
                ps.insert(level_name(l, part), w, tr)?;
            }
            ps.insert(level_name(l, "in.g"), Tensor::ones([c]), tr)?;
            ps.insert(level_name(l, "in.b"), Tensor::zeros([c]), tr)?;
        }
        let std = (2.0 / (9 * c) as f64).sqrt();
        ps.insert(
            level_name(l, "conv.w"),
            Tensor::trunc_normal([c, c, 3, 3], std, &mut rng),
            tr,
        )?;
        ps.insert(level_name(l, "conv.b"), Tensor::zeros([c]), tr)?;
    }
    let std = (1.0 / (4 * c) as f64).sqrt();
    ps.insert(FUSE_W, Tensor::trunc_normal([1, 4 * c], std, &mut rng), tr)?;
    ps.insert(FUSE_B, Tensor::zeros([1]), tr)?;
    Ok(ps)
}

/// Area-downsamples the mask to `h×w`, blurs it, and repeats it over `c`
/// channels: `M′[N×C]` with `N = h·w`.
pub fn prepare_support_mask(mask: &Mask, h: usize, w: usize, c: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Tensor(metaseg_autodiff::Error::Parameter {
            op: "prepare_support_mask",
            name: "sigma",
            value: sigma,
        }));
    }
    let (mh, mw) = mask.shape();
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::Tensor(metaseg_autodiff::Error::Dimension {
            op: "prepare_support_mask",
            lhs: vec![mh, mw],
            rhs: vec![h, w],
        }));
    }
    let (fy, fx) = (mh / h, mw / w);
    let area = (fy * fx) as f64;
    let mut small = vec![0.0; h * w];
    for i in 0..mh {
        for j in 0..mw {
            small[(i / fy) * w + j / fx] += mask.data()[i * mw + j] as f64;
        }
    }
    for v in &mut small {
        *v /= area;
    }
    let blurred = blur_plane(&small, h, w, &gaussian_kernel(sigma));
    Ok(Tensor::from_fn([h * w, c], |k| blurred[k / c]))
}

fn checked<T: Real>(tape: &Tape<T>, v: Var, stage: &str) -> Result<Var> {
    tape.value(v).ensure_finite(stage)?;
    Ok(v)
}

/// Records the module on `tape`. `f` and `mp` are `[N×C]`.
#[allow(clippy::too_many_arguments)]
pub fn fmam_on<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    mp: Var,
    wk: Var,
    wq: Var,
    wv: Var,
    gamma: Var,
    beta: Var,
    tau: f64,
) -> Result<Var> {
    let masked = tape.mul(mp, f)?;
    let k = tape.matmul(masked, wk)?;
    let k = checked(tape, k, "fmam: K")?;
    let q = tape.matmul(f, wq)?;
    let q = checked(tape, q, "fmam: Q")?;
    let v = tape.matmul(mp, wv)?;
    let v = checked(tape, v, "fmam: V")?;
    let kn = tape.l2_normalize_rows(k, L2_EPS)?;
    let qn = tape.l2_normalize_rows(q, L2_EPS)?;
    let kt = tape.transpose(kn)?;
    let s = tape.matmul(qn, kt)?;
    let a = tape.softmax_col(s, tau)?;
    let a = checked(tape, a, "fmam: attention")?;
    let av = tape.matmul(a, v)?;
    let prod = tape.mul(av, f)?;
    let out = tape.instance_norm(prod, gamma, beta, INS_EPS)?;
    checked(tape, out, "fmam: output")
}

/// Value-level module on plain tensors.
pub fn fmam(f: &Tensor, mp: &Tensor, w: &FmamWeights) -> Result<Tensor> {
    let mut tape = Tape::<f64>::new();
    let vars = [f, mp, &w.wk, &w.wq, &w.wv, &w.gamma, &w.beta].map(|t| tape.constant(t.clone()));
    let out = fmam_on(
        &mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], w.tau,
    )?;
    Ok(tape.value(out).clone())
}

/// Finite-difference check of the whole module with respect to each of its
/// seven inputs, on `trials` random `6×4` instances.
pub fn fmam_gradcheck(seed: u64, trials: usize, tau: f64, h: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for trial in 0..trials {
        let mut rng = purpose_stream(seed, Purpose::Init, &[u64::from(u32::MAX), trial as u64]);
        let inputs = [
            Tensor::randn([6, 4], 1.0, &mut rng),
            Tensor::uniform([6, 4], 0.0, 1.0, &mut rng),
            Tensor::randn([4, 4], 0.5, &mut rng),
            Tensor::randn([4, 4], 0.5, &mut rng),
            Tensor::randn([4, 4], 0.5, &mut rng),
            Tensor::uniform([4], 0.5, 1.5, &mut rng),
            Tensor::randn([4], 0.5, &mut rng),
        ];
        let weights = Tensor::uniform([6, 4], -1.0, 1.0, &mut rng);
        for which in 0..inputs.len() {
            let build = |tape: &mut Tape, x: Var| -> metaseg_autodiff::Result<Var> {
                let v: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = fmam_on(tape, v[0], v[1], v[2], v[3], v[4], v[5], v[6], tau)
                    .map_err(|e| metaseg_autodiff::Error::Oracle(e.to_string()))?;
                let w = tape.constant(weights.clone());
                let p = tape.mul(y, w)?;
                Ok(tape.sum(p))
            };
            out.push(OpCheck {
                op: "fmam",
                input: which,
                trial,
                report: finite_diff_check(build, &inputs[which], h, tol)?,
            });
        }
    }
    Ok(out)
}

/// Records the decoder: four `[C×h×w]` levels and `M′[N×C]` give `[H×W]` logits.
pub fn decode_on<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    levels: &[Var],
    mp: &Tensor,
) -> Result<Var> {
    if levels.len() != 4 {
        return Err(Error::Tensor(metaseg_autodiff::Error::Contract(format!(
            "decoder needs 4 levels, got {}",
            levels.len()
        ))));
    }
    let size = cfg.encoder.image_size;
    let mpv = tape.constant(mp.lift(None));
    let mut ups = Vec::with_capacity(4);
    for (l, &z) in levels.iter().enumerate() {
        let (c, h, w) = tape.value(z).dims3("decode")?;
        let mut x = z;
        if cfg.decoder.kind == DecoderKind::Fmad {
            let flat = tape.reshape(z, &[c, h * w])?;
            let f = tape.transpose(flat)?;
            let fp = fmam_on(
                tape,
                f,
                mpv,
                b.var(&level_name(l, "wk"))?,
                b.var(&level_name(l, "wq"))?,
                b.var(&level_name(l, "wv"))?,
                b.var(&level_name(l, "in.g"))?,
                b.var(&level_name(l, "in.b"))?,
                cfg.decoder.tau,
            )?;
            let t = tape.transpose(fp)?;
            x = tape.reshape(t, &[c, h, w])?;
        }
        let y = tape.conv3x3(x, b.var(&level_name(l, "conv.w"))?, b.var(&level_name(l, "conv.b"))?)?;
        let y = tape.gelu(y);
        ups.push(tape.upsample(y, size, size, Resize::Bilinear)?);
    }
    // 1×1 fusion over the 4·C upsampled channels.
    let cat = tape.concat_rows(&ups)?;
    let channels = tape.shape(cat)[0];
    let flat = tape.reshape(cat, &[channels, size * size])?;
    let z = tape.matmul(b.var(FUSE_W)?, flat)?;
    let z = tape.reshape(z, &[size * size, 1])?;
    let z = tape.add_row(z, b.var(FUSE_B)?)?;
    let logits = tape.reshape(z, &[size, size])?;
    checked(tape, logits, "decode: logits")
}

/// Value-level decoder.
pub fn decode(cfg: &ModelConfig, params: &ParamSet, levels: &MultiLevelEmbedding, support: &Mask) -> Result<Tensor> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let (c, h, w) = levels.levels[0].dims3("decode")?;
    let mp = prepare_support_mask(support, h, w, c, cfg.decoder.sigma)?;
    let vars: Vec<Var> = levels.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let out = decode_on(&mut tape, &b, cfg, &vars, &mp)?;
    Ok(tape.value(out).clone())
}

/// `sigmoid(logit) >= threshold`; an exact tie is foreground.
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Result<Mask> {
    let p = logits.map(metaseg_autodiff::kernels::sigmoid);
    Mask::from_threshold(&p, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn support_mask_extremes() {
        let ones = Mask::from_fn(8, 8, |_, _| true);
        let mp = prepare_support_mask(&ones, 4, 4, 3, 1.0).unwrap();
        assert!(mp.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mp = prepare_support_mask(&Mask::empty(8, 8), 4, 4, 3, 1.0).unwrap();
        assert!(mp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn support_mask_rows_repeat_one_value() {
        let m = Mask::from_fn(8, 8, |i, j| i < 3 && j > 2);
        let mp = prepare_support_mask(&m, 4, 4, 5, 0.8).unwrap();
        for row in mp.data().chunks(5) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn zero_mask_collapses_to_beta() {
        let mut rng = stream(4, &[]);
        let f = Tensor::randn([6, 3], 1.0, &mut rng);
        let mut w = FmamWeights::identity(3, 0.1);
        w.beta = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = fmam(&f, &Tensor::zeros([6, 3]), &w).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let f = Tensor::new([1, 2], vec![0.3, -0.7]).unwrap();
        let mp = Tensor::new([1, 2], vec![0.6, 0.6]).unwrap();
        let w = FmamWeights::identity(2, 0.05);
        let out = fmam(&f, &mp, &w).unwrap();
        // A = [[1]]: F′ = InsNorm(V ⊙ F) over a single position is zero before the affine shift.
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn composite_module_gradients() {
        for c in fmam_gradcheck(11, 3, 0.1, 1e-5, 1e-4).unwrap() {
            assert!(c.report.pass, "input {} trial {}: {:?}", c.input, c.trial, c.report);
        }
    }

    #[test]
    fn predict_mask_tie_and_extremes() {
        let l = Tensor::new([1, 3], vec![10.0, -10.0, 0.0]).unwrap();
        assert_eq!(predict_mask(&l, 0.5).unwrap().data(), &[1, 0, 1]);
    }
}
