//! Patch-embedding transformer with frozen base weights and trainable adapters.
//!
//! Every layer is a pre-norm block. After the MLP, layer `k` adds the
//! adapter output `up(GELU(tune_k(F_k)))` computed from the layer's input
//! tokens `F_k`; `up` is one matrix shared by all layers and starts at zero.
//! The token grid is snapshotted after each quarter of the layers, giving
//! four `d×h×w` embeddings.

use metaseg_autodiff::{Real, Tape, Tensor, Var};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet, Tag};
use crate::rng::{purpose_stream, Purpose};

pub const PROJ_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

pub const PATCH_W: &str = "enc.patch.w";
pub const PATCH_B: &str = "enc.patch.b";
pub const POS: &str = "enc.pos";
pub const ADAPTER_UP: &str = "enc.adapter.up";

pub fn layer_name(k: usize, part: &str) -> String {
    format!("enc.l{k}.{part}")
}

pub fn tune_name(k: usize) -> String {
    format!("enc.adapter.tune{k}")
}

/// The four base matrices of each layer.
pub const BASE_MATRICES: [&str; 4] = ["qkv.w", "o.w", "mlp1.w", "mlp2.w"];

/// Four snapshots of the token grid, each `d×h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelEmbedding {
    pub levels: [Tensor; 4],
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = purpose_stream(seed, Purpose::Init, &[1]);
    let (d, p2, n) = (cfg.embed_dim, cfg.patch_size * cfg.patch_size, cfg.n_tokens());
    let hid = 4 * d;
    let mut ps = ParamSet::new();
    let frozen = Tag::Frozen;
    ps.insert(PATCH_W, Tensor::trunc_normal([p2, d], PROJ_STD, &mut rng), frozen)?;
    ps.insert(PATCH_B, Tensor::zeros([d]), frozen)?;
    ps.insert(POS, Tensor::trunc_normal([n, d], PROJ_STD, &mut rng), frozen)?;
    for k in 0..cfg.n_layers {
        let mut put = |part: &str, t: Tensor| ps.insert(layer_name(k, part), t, frozen);
        put("ln1.g", Tensor::ones([d]))?;
        put("ln1.b", Tensor::zeros([d]))?;
        put("qkv.w", Tensor::trunc_normal([d, 3 * d], PROJ_STD, &mut rng))?;
        put("qkv.b", Tensor::zeros([3 * d]))?;
        put("o.w", Tensor::trunc_normal([d, d], PROJ_STD, &mut rng))?;
        put("o.b", Tensor::zeros([d]))?;
        put("ln2.g", Tensor::ones([d]))?;
        put("ln2.b", Tensor::zeros([d]))?;
        put("mlp1.w", Tensor::trunc_normal([d, hid], PROJ_STD, &mut rng))?;
        put("mlp1.b", Tensor::zeros([hid]))?;
        put("mlp2.w", Tensor::trunc_normal([hid, d], PROJ_STD, &mut rng))?;
        put("mlp2.b", Tensor::zeros([d]))?;
    }
    for k in 0..cfg.n_layers {
        let t = Tensor::trunc_normal([d, cfg.adapter_hidden], PROJ_STD, &mut rng);
        ps.insert(tune_name(k), t, Tag::Trainable)?;
    }
    ps.insert(ADAPTER_UP, Tensor::zeros([cfg.adapter_hidden, d]), Tag::Trainable)?;
    Ok(ps)
}

/// `(frozen, trainable)` split of a parameter set.
pub fn partition_params(params: &ParamSet) -> (ParamSet, ParamSet) {
    params.partition()
}

/// Non-overlapping `p×p` patches as rows of a `[n_tokens × p²]` matrix.
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (h, w) = image.dims2("encode")?;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Tensor(metaseg_autodiff::Error::Dimension {
            op: "encode",
            lhs: vec![h, w],
            rhs: vec![cfg.image_size, cfg.image_size],
        }));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let src = image.data();
    Ok(Tensor::from_fn([g * g, p * p], |k| {
        let (tok, px) = (k / (p * p), k % (p * p));
        let (ti, tj) = (tok / g, tok % g);
        let (pi, pj) = (px / p, px % p);
        src[(ti * p + pi) * w + tj * p + pj]
    }))
}

/// `P_k = up(GELU(tune_k(F_k)))` on `tokens[n×d]`.
pub fn adapter_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &EncoderConfig,
    tokens: Var,
    k: usize,
) -> Result<Var> {
    if k >= cfg.n_layers {
        return Err(Error::Lookup(format!(
            "adapter layer {k} out of range (encoder has {} layers)",
            cfg.n_layers
        )));
    }
    let t = tape.matmul(tokens, b.var(&tune_name(k))?)?;
    let g = tape.gelu(t);
    Ok(tape.matmul(g, b.var(ADAPTER_UP)?)?)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, bias)?)
}

fn attention<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &EncoderConfig, k: usize, x: Var) -> Result<Var> {
    let d = cfg.embed_dim;
    let dh = d / cfg.n_heads;
    let qkv = linear(
        tape,
        x,
        b.var(&layer_name(k, "qkv.w"))?,
        b.var(&layer_name(k, "qkv.b"))?,
    )?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let q = tape.slice_cols(qkv, hd * dh, dh)?;
        let kk = tape.slice_cols(qkv, d + hd * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
        let kt = tape.transpose(kk)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(s)?;
        heads.push(tape.matmul(a, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    linear(tape, cat, b.var(&layer_name(k, "o.w"))?, b.var(&layer_name(k, "o.b"))?)
}

fn block<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &EncoderConfig, k: usize, x: Var, adapters: bool) -> Result<Var> {
    let ln = |tape: &mut Tape<T>, x: Var, which: &str| -> Result<Var> {
        let g = b.var(&layer_name(k, &format!("{which}.g")))?;
        let beta = b.var(&layer_name(k, &format!("{which}.b")))?;
        Ok(tape.layer_norm(x, g, beta, LN_EPS)?)
    };
    let h = ln(tape, x, "ln1")?;
    let a = attention(tape, b, cfg, k, h)?;
    let x1 = tape.add(x, a)?;
    let h2 = ln(tape, x1, "ln2")?;
    let m = linear(
        tape,
        h2,
        b.var(&layer_name(k, "mlp1.w"))?,
        b.var(&layer_name(k, "mlp1.b"))?,
    )?;
    let m = tape.gelu(m);
    let m = linear(
        tape,
        m,
        b.var(&layer_name(k, "mlp2.w"))?,
        b.var(&layer_name(k, "mlp2.b"))?,
    )?;
    let mut out = tape.add(x1, m)?;
    if adapters {
        let p = adapter_forward(tape, b, cfg, x, k)?;
        out = tape.add(out, p)?;
    }
    Ok(out)
}

/// Token grid `[n×d]` to a channel-first map `[d×h×w]`, normalized across channels.
fn snapshot<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let d = cfg.embed_dim;
    let g = tape.constant(Tensor::ones([d]));
    let z = tape.constant(Tensor::zeros([d]));
    let n = tape.layer_norm(x, g, z, LN_EPS)?;
    let t = tape.transpose(n)?;
    Ok(tape.reshape(t, &[d, cfg.grid(), cfg.grid()])?)
}

pub(crate) fn encode_with<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &EncoderConfig,
    image: &Tensor,
    adapters: bool,
) -> Result<[Var; 4]> {
    let patches = tape.constant(patchify(image, cfg)?.lift(None));
    let x = linear(tape, patches, b.var(PATCH_W)?, b.var(PATCH_B)?)?;
    let mut x = tape.add(x, b.var(POS)?)?;
    let per = cfg.n_layers / 4;
    let mut levels = Vec::with_capacity(4);
    for k in 0..cfg.n_layers {
        x = block(tape, b, cfg, k, x, adapters)?;
        if (k + 1) % per == 0 {
            levels.push(snapshot(tape, cfg, x)?);
        }
    }
    Ok([levels[0], levels[1], levels[2], levels[3]])
}

/// Records the encoder on `tape`; returns the four level maps.
pub fn encode_on<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &EncoderConfig, image: &Tensor) -> Result<[Var; 4]> {
    encode_with(tape, b, cfg, image, true)
}

pub fn encode(cfg: &EncoderConfig, params: &ParamSet, image: &Tensor) -> Result<MultiLevelEmbedding> {
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape, None);
    let vars = encode_on(&mut tape, &b, cfg, image)?;
    Ok(MultiLevelEmbedding {
        levels: vars.map(|v| tape.value(v).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            n_layers: 4,
            n_heads: 2,
            adapter_hidden: 3,
        }
    }

    fn image(seed: u64) -> Tensor {
        Tensor::uniform([16, 16], 0.0, 1.0, &mut stream(seed, &[]))
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_encoder(&small(), 3).unwrap();
        let b = init_encoder(&small(), 3).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), init_encoder(&small(), 4).unwrap().hash());
    }

    #[test]
    fn matrix_counts_follow_layer_count() {
        let cfg = small();
        let ps = init_encoder(&cfg, 0).unwrap();
        let base = ps
            .iter()
            .filter(|(n, p)| p.tag == Tag::Frozen && BASE_MATRICES.iter().any(|m| n.ends_with(m)))
            .count();
        let adapters = ps
            .iter()
            .filter(|(_, p)| p.tag == Tag::Trainable && p.tensor.shape().len() == 2)
            .count();
        assert_eq!(base, 4 * cfg.n_layers);
        assert_eq!(adapters, cfg.n_layers + 1);
        assert_eq!(ps.count(Tag::Trainable), cfg.n_layers + 1);
    }

    #[test]
    fn zero_up_projection_matches_adapter_free_forward() {
        let cfg = small();
        let ps = init_encoder(&cfg, 1).unwrap();
        let img = image(2);
        let mut tape = Tape::<f64>::new();
        let b = ps.bind(&mut tape, None);
        let with = encode_with(&mut tape, &b, &cfg, &img, true).unwrap();
        let without = encode_with(&mut tape, &b, &cfg, &img, false).unwrap();
        for (a, c) in with.iter().zip(&without) {
            assert_eq!(tape.value(*a), tape.value(*c));
        }
    }

    #[test]
    fn snapshots_have_level_shape() {
        let cfg = small();
        let ps = init_encoder(&cfg, 1).unwrap();
        let e = encode(&cfg, &ps, &image(0)).unwrap();
        for l in &e.levels {
            assert_eq!(l.shape(), &[8, 4, 4]);
        }
        assert_ne!(e.levels[0], e.levels[3]);
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let cfg = small();
        let ps = init_encoder(&cfg, 1).unwrap();
        let err = encode(&cfg, &ps, &Tensor::zeros([8, 8])).unwrap_err();
        assert!(matches!(err, Error::Tensor(metaseg_autodiff::Error::Dimension { .. })));
    }

    #[test]
    fn adapter_layer_out_of_range() {
        let cfg = small();
        let ps = init_encoder(&cfg, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let b = ps.bind(&mut tape, None);
        let x = tape.constant(Tensor::zeros([16, 8]));
        assert!(matches!(
            adapter_forward(&mut tape, &b, &cfg, x, 4),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn patchify_layout() {
        let cfg = small();
        let img = Tensor::from_fn([16, 16], |k| k as f64);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[16, 16]);
        // token 1 is the second patch of the first patch row; its first pixel is (0, 4)
        assert_eq!(p.data()[16], 4.0);
        // token 4 starts the second patch row at pixel (4, 0)
        assert_eq!(p.data()[4 * 16], 64.0);
    }
}
