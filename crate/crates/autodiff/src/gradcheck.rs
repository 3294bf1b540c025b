//! Central finite-difference gradient oracle.
//!
//! The analytic gradient comes from [`Tape::backward`]; the numeric one from
//! `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate. Relative error per
//! coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Resize, Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub coordinates: usize,
    pub pass: bool,
}

/// Evaluates `build` on a fresh tape with `x` as the only leaf and returns
/// the loss value together with its gradient.
pub fn analytic_gradient<F>(build: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&mut tape, v)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.get(v)))
}

fn evaluate<F>(build: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let loss = build(&mut tape, v)?;
    let value = tape.value(loss);
    if !value.is_scalar() {
        return Err(Error::Oracle(format!("function returned shape {:?}", value.shape())));
    }
    let f = value.item();
    if !f.is_finite() {
        return Err(Error::Oracle(format!("non-finite function value {f}")));
    }
    Ok(f)
}

/// Central-difference gradient of a tape-built scalar function.
pub fn numeric_gradient<F>(build: &F, x0: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = evaluate(build, &x)?;
        x.data_mut()[i] = orig - h;
        let fm = evaluate(build, &x)?;
        x.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Compares two gradients coordinate-wise.
pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        coordinates: analytic.len(),
        pass: analytic.shape() == numeric.shape(),
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        if !rel.is_finite() {
            report.pass = false;
        }
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    report.pass &= report.max_rel_err <= tol;
    report
}

/// Checks the tape gradient of `build` at `x0` against central differences.
pub fn finite_diff_check<F>(build: F, x0: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (value, analytic) = analytic_gradient(&build, x0)?;
    if !value.is_finite() {
        return Err(Error::Oracle(format!("non-finite function value {value}")));
    }
    let numeric = numeric_gradient(&build, x0, h)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Result of checking one primitive on one random draw.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub input: usize,
    pub trial: usize,
    pub report: GradCheckReport,
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A registered primitive: how to draw inputs and how to apply it.
pub struct Primitive {
    pub name: &'static str,
    draw: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    apply: fn() -> OpFn,
}

impl std::fmt::Debug for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Primitive").field("name", &self.name).finish()
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng)
}

fn op(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(f)
}

macro_rules! prim {
    ($name:expr, |$rng:ident| $draw:expr, |$t:ident, $v:ident| $apply:expr) => {
        Primitive {
            name: $name,
            draw: |$rng| $draw,
            apply: || op(|$t, $v| $apply),
        }
    };
}

/// Every differentiable primitive the tape records.
pub fn op_catalog() -> Vec<Primitive> {
    vec![
        prim!("add", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |t, v| t
            .add(v[0], v[1])),
        prim!("sub", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |t, v| t
            .sub(v[0], v[1])),
        prim!("mul", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |t, v| t
            .mul(v[0], v[1])),
        prim!("div", |r| vec![normal(&[3, 4], r), positive(&[3, 4], r)], |t, v| t
            .div(v[0], v[1])),
        prim!("add_row", |r| vec![normal(&[3, 4], r), normal(&[4], r)], |t, v| t
            .add_row(v[0], v[1])),
        prim!("add_scalar", |r| vec![normal(&[3, 4], r)], |t, v| Ok(
            t.add_scalar(v[0], 0.7)
        )),
        prim!("scale", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.scale(v[0], -1.3))),
        prim!("matmul", |r| vec![normal(&[4, 5], r), normal(&[5, 3], r)], |t, v| t
            .matmul(v[0], v[1])),
        prim!("transpose", |r| vec![normal(&[3, 5], r)], |t, v| t.transpose(v[0])),
        prim!("reshape", |r| vec![normal(&[3, 4], r)], |t, v| t.reshape(v[0], &[2, 6])),
        prim!("gelu", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.gelu(v[0]))),
        prim!("sigmoid", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.sigmoid(v[0]))),
        prim!("exp", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.exp(v[0]))),
        prim!("log", |r| vec![positive(&[3, 4], r)], |t, v| t.log(v[0])),
        prim!("softplus", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.softplus(v[0]))),
        prim!("sum", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.sum(v[0]))),
        prim!("mean", |r| vec![normal(&[3, 4], r)], |t, v| Ok(t.mean(v[0]))),
        prim!("softmax_rows", |r| vec![normal(&[4, 5], r)], |t, v| t
            .softmax_rows(v[0])),
        // Keep the logit spread near 10 at τ = 0.1; fully saturated columns have
        // gradients below what h = 1e-5 central differences resolve.
        prim!(
            "softmax_col",
            |r| vec![Tensor::uniform([5, 4], -0.5, 0.5, r)],
            |t, v| t.softmax_col(v[0], 0.1)
        ),
        prim!("softmax_col_tau1", |r| vec![normal(&[5, 4], r)], |t, v| t
            .softmax_col(v[0], 1.0)),
        prim!("l2_normalize_rows", |r| vec![normal(&[4, 3], r)], |t, v| t
            .l2_normalize_rows(v[0], 1e-12)),
        prim!(
            "instance_norm",
            |r| vec![normal(&[6, 4], r), normal(&[4], r), normal(&[4], r)],
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5)
        ),
        prim!(
            "layer_norm",
            |r| vec![normal(&[5, 4], r), normal(&[4], r), normal(&[4], r)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
        ),
        prim!("bilinear_sample", |r| vec![normal(&[3, 4, 5], r)], |t, v| t
            .bilinear_sample(v[0], &[[0.13, 0.71], [0.5, 0.5], [0.92, 0.04]])),
        prim!("upsample_nearest", |r| vec![normal(&[2, 3, 4], r)], |t, v| t.upsample(
            v[0],
            5,
            7,
            Resize::Nearest
        )),
        prim!("upsample_bilinear", |r| vec![normal(&[2, 3, 4], r)], |t, v| t.upsample(
            v[0],
            5,
            7,
            Resize::Bilinear
        )),
        prim!(
            "conv3x3",
            |r| vec![normal(&[2, 5, 4], r), normal(&[3, 2, 3, 3], r), normal(&[3], r)],
            |t, v| t.conv3x3(v[0], v[1], v[2])
        ),
        prim!("gaussian_blur", |r| vec![normal(&[6, 7], r)], |t, v| t
            .gaussian_blur(v[0], 1.0)),
        prim!(
            "concat_rows",
            |r| vec![normal(&[2, 3], r), normal(&[4, 3], r)],
            |t, v| t.concat_rows(&[v[0], v[1]])
        ),
        prim!(
            "concat_cols",
            |r| vec![normal(&[3, 2], r), normal(&[3, 4], r)],
            |t, v| t.concat_cols(&[v[0], v[1]])
        ),
        prim!("slice_rows", |r| vec![normal(&[5, 3], r)], |t, v| t
            .slice_rows(v[0], 1, 3)),
        prim!("slice_cols", |r| vec![normal(&[3, 5], r)], |t, v| t
            .slice_cols(v[0], 2, 2)),
        prim!("gather_rows", |r| vec![normal(&[3, 4], r)], |t, v| t
            .gather_rows(v[0], &[2, 0, 2])),
    ]
}

impl Primitive {
    /// Checks the gradient with respect to every input on one random draw.
    pub fn check(&self, rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<Vec<(usize, GradCheckReport)>> {
        let inputs = (self.draw)(rng);
        let apply = (self.apply)();
        // Probe the output shape once to draw fixed projection weights.
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = apply(&mut tape, &vars)?;
            tape.shape(out).to_vec()
        };
        let weights = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
        let mut reports = Vec::with_capacity(inputs.len());
        for which in 0..inputs.len() {
            let build = |tape: &mut Tape, x: Var| -> Result<Var> {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { tape.constant(t.clone()) })
                    .collect();
                let out = apply(tape, &vars)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            };
            reports.push((which, finite_diff_check(build, &inputs[which], h, tol)?));
        }
        Ok(reports)
    }
}

/// Runs the whole catalog over `trials` seeded random draws per primitive.
pub fn check_catalog(seed: u64, trials: usize, h: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (k, prim) in op_catalog().iter().enumerate() {
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ trial as u64);
            for (input, report) in prim.check(&mut rng, h, tol)? {
                out.push(OpCheck {
                    op: prim.name,
                    input,
                    trial,
                    report,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn([7], 1.0, &mut rng);
        let build = |t: &mut Tape, x: Var| -> Result<Var> {
            let sq = t.mul(x, x)?;
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        };
        let (_, g) = analytic_gradient(&build, &x0).unwrap();
        assert_eq!(g, x0);
        let report = finite_diff_check(build, &x0, DEFAULT_STEP, 1e-8).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn softmax_col_sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn([5, 5], 1.0, &mut rng);
        let build = |t: &mut Tape, x: Var| -> Result<Var> {
            let s = t.softmax_col(x, 0.5)?;
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        };
        let report = finite_diff_check(build, &x0, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn([6], 1.0, &mut rng);
        let build = |t: &mut Tape, x: Var| -> Result<Var> {
            let e = t.exp(x);
            Ok(t.sum(e))
        };
        let (_, analytic) = analytic_gradient(&build, &x0).unwrap();
        let corrupted = analytic.map(|v| v * 1.1);
        let numeric = numeric_gradient(&build, &x0, DEFAULT_STEP).unwrap();
        assert!(compare_gradients(&analytic, &numeric, DEFAULT_TOLERANCE).pass);
        let report = compare_gradients(&corrupted, &numeric, DEFAULT_TOLERANCE);
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.05);
    }

    #[test]
    fn non_finite_function_is_an_oracle_error() {
        let x0 = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let build = |t: &mut Tape, x: Var| -> Result<Var> {
            let s = t.scale(x, 1e308);
            let s = t.scale(s, 1e308);
            Ok(t.sum(s))
        };
        assert!(matches!(
            finite_diff_check(build, &x0, DEFAULT_STEP, DEFAULT_TOLERANCE),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn every_primitive_passes_three_draws() {
        let results = check_catalog(7, 3, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        let failures: Vec<_> = results.iter().filter(|r| !r.report.pass).collect();
        assert!(failures.is_empty(), "{failures:#?}");
        let names: std::collections::BTreeSet<_> = results.iter().map(|r| r.op).collect();
        assert_eq!(names.len(), op_catalog().len());
    }
}
