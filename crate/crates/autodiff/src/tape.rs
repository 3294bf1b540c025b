//! Wengert tape: operations are recorded in execution order during the
//! forward pass and replayed in reverse to accumulate gradients.
//!
//! A node is *tracked* when it is a [`Tape::leaf`] or depends on one.
//! Constants ([`Tape::constant`]) never receive gradients, which is how
//! frozen weights and data stay out of the backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, Tap};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Interpolation used by [`Tape::upsample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    Bilinear,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var, f64),
    L2NormalizeRows(Var, f64),
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        per_column: bool,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Sample {
        fmap: Var,
        taps: Vec<[Tap; 4]>,
    },
    Upsample {
        x: Var,
        taps: Vec<[Tap; 4]>,
    },
    Conv3x3(Var, Var, Var),
    Blur {
        x: Var,
        kernel: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation recorder. Single writer; values are immutable once recorded.
#[derive(Debug)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Gradient for `v`, or `None` when no path from the loss reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// `x[n×c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("add_row")?;
        if self.value(b).len() != c {
            return Err(Error::dims("add_row", self.shape(x), self.shape(b)));
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let data = (0..n * c).map(|i| xv[i] + bv[i % c]).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::AddRow(x, b), &[x, b]))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let v = self.value(x).map(|a| a + kk);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a.scale(k));
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(Real::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| v.re() <= 0.0) {
            return Err(Error::Range {
                op: "log",
                value: bad.re(),
                expected: "(0, inf)",
            });
        }
        let v = self.value(x).map(Real::ln);
        Ok(self.push(v, Op::Log(x), &[x]))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).sum().scale(1.0 / n);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Softmax over each row (standard attention over keys).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        let data = kernels::softmax_rows(self.value(x).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::SoftmaxRows(x), &[x]))
    }

    /// Softmax of `x/τ` over each column, so every column sums to one.
    pub fn softmax_col(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter {
                op: "softmax_col",
                name: "tau",
                value: tau,
            });
        }
        let (r, c) = self.value(x).dims2("softmax_col")?;
        let data = kernels::softmax_cols(self.value(x).data(), r, c, tau);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::SoftmaxCols(x, tau), &[x]))
    }

    /// Row-wise `x / (‖x‖ + eps)`; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2("l2_normalize_rows")?;
        let data = kernels::l2_normalize_rows(self.value(x).data(), r, c, eps);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::L2NormalizeRows(x, eps), &[x]))
    }

    /// Per-channel normalization of `x[n×c]` over the `n` positions, then `γ·x̂ + β`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.normalize("instance_norm", x, gamma, beta, eps, true)
    }

    /// Per-row normalization of `x[n×c]` over the `c` channels, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.normalize("layer_norm", x, gamma, beta, eps, false)
    }

    fn normalize(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        per_column: bool,
    ) -> Result<Var> {
        let (r, c) = match self.value(x).dims2(op) {
            Ok(d) => d,
            Err(_) if self.value(x).is_empty() => return Err(Error::EmptyInput { op }),
            Err(e) => return Err(e),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dims(op, self.shape(x), self.shape(gamma)));
        }
        let (normalized, inv_std) = kernels::normalize_axis(self.value(x).data(), r, c, eps, per_column);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = normalized
            .iter()
            .enumerate()
            .map(|(i, &y)| g[i % c] * y + b[i % c])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::Normalize {
                x,
                gamma,
                beta,
                per_column,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Align-corners bilinear interpolation of `fmap[c×h×w]` at normalized
    /// points, giving one `c`-vector per point (`[p×c]`).
    pub fn bilinear_sample(&mut self, fmap: Var, points: &[[f64; 2]]) -> Result<Var> {
        let (c, h, w) = self.value(fmap).dims3("bilinear_sample")?;
        if points.is_empty() {
            return Err(Error::EmptyInput { op: "bilinear_sample" });
        }
        let mut taps = Vec::with_capacity(points.len());
        for &[x, y] in points {
            for v in [x, y] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Range {
                        op: "bilinear_sample",
                        value: v,
                        expected: "[0, 1]",
                    });
                }
            }
            taps.push(kernels::bilinear_taps(x, y, h, w));
        }
        let plane = h * w;
        let src = self.value(fmap).data();
        let mut data = Vec::with_capacity(points.len() * c);
        for tp in &taps {
            for ch in 0..c {
                let base = ch * plane;
                let mut acc = T::zero();
                for &(idx, wt) in tp {
                    if wt != 0.0 {
                        acc += src[base + idx].scale(wt);
                    }
                }
                data.push(acc);
            }
        }
        let p = points.len();
        Ok(self.push(Tensor::from_parts(vec![p, c], data), Op::Sample { fmap, taps }, &[fmap]))
    }

    /// Resizes `x[c×h×w]` to `[c×out_h×out_w]` (bilinear is align-corners).
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize, mode: Resize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("upsample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "upsample",
                &[out_h, out_w],
                "target extents must be positive",
            ));
        }
        let taps = kernels::upsample_taps(h, w, out_h, out_w, mode == Resize::Bilinear);
        let data = kernels::apply_taps(self.value(x).data(), c, h * w, &taps);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_h, out_w], data),
            Op::Upsample { x, taps },
            &[x],
        ))
    }

    /// 3×3 convolution with replicate padding: `x[cin×h×w]`, `weight[cout×cin×3×3]`, `bias[cout]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3("conv3x3")?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::dims("conv3x3", self.shape(x), &ws));
        }
        let cout = ws[0];
        if self.value(bias).len() != cout {
            return Err(Error::dims("conv3x3", &ws, self.shape(bias)));
        }
        let data = kernels::conv3x3(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            cin,
            cout,
            h,
            w,
        );
        Ok(self.push(
            Tensor::from_parts(vec![cout, h, w], data),
            Op::Conv3x3(x, weight, bias),
            &[x, weight, bias],
        ))
    }

    /// Separable Gaussian blur of an `h×w` plane, radius `ceil(3σ)`, replicate padding.
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter {
                op: "gaussian_blur",
                name: "sigma",
                value: sigma,
            });
        }
        let (h, w) = self.value(x).dims2("gaussian_blur")?;
        let kernel = kernels::gaussian_kernel(sigma);
        let data = kernels::blur_plane(self.value(x).data(), h, w, &kernel);
        Ok(self.push(Tensor::from_parts(vec![h, w], data), Op::Blur { x, kernel }, &[x]))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat_rows" })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dims("concat_rows", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenation of rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat_cols" })?;
        let (rows, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dims("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                &[r, c],
                format!("rows {start}..{}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                &[r, c],
                format!("cols {start}..{}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols(x, start), &[x]))
    }

    /// Rows of `table[k×c]` picked by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (k, c) = self.value(table).dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::EmptyInput { op: "gather_rows" });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::Range {
                op: "gather_rows",
                value: bad as f64,
                expected: "row index within table",
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], data),
            Op::GatherRows(table, idx.to_vec()),
            &[table],
        ))
    }

    /// Reverse pass from a scalar node. Deterministic; the tape is not modified.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let shape = self.shape(v).to_vec();
        self.acc(grads, v, Tensor::from_parts(shape, data));
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_data(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.acc_data(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                let ov = out.data();
                self.acc_data(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g / y).collect());
                self.acc_data(
                    grads,
                    *b,
                    gd.iter().zip(ov).zip(bv).map(|((&g, &q), &y)| -g * q / y).collect(),
                );
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                let c = self.value(*b).len();
                let mut db = vec![T::zero(); c];
                for (i, &v) in gd.iter().enumerate() {
                    db[i % c] += v;
                }
                self.acc_data(grads, *b, db);
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Scale(x, k) => self.acc(grads, *x, g.map(|v| v.scale(*k))),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.is_tracked(*a) {
                    let da = kernels::matmul_bt(gd, self.value(*b).data(), m, k, n);
                    self.acc_data(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let db = kernels::matmul_at(self.value(*a).data(), gd, m, k, n);
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let t = g.transpose2().expect("rank-2 gradient");
                self.acc(grads, *x, t);
            }
            Op::Reshape(x) => self.acc_data(grads, *x, gd.to_vec()),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_data(
                    grads,
                    *x,
                    gd.iter().zip(xv).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect(),
                );
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out.data()).map(|(&g, &e)| g * e).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_data(grads, *x, gd.iter().zip(xv).map(|(&g, &v)| g / v).collect());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc_data(
                    grads,
                    *x,
                    gd.iter().zip(xv).map(|(&g, &v)| g * kernels::sigmoid(v)).collect(),
                );
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, Tensor::full(s, gd[0].scale(1.0 / n)));
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let d = kernels::softmax_rows_adjoint(out.data(), gd, r, c);
                self.acc_data(grads, *x, d);
            }
            Op::SoftmaxCols(x, tau) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let d = kernels::softmax_cols_adjoint(out.data(), gd, r, c, *tau);
                self.acc_data(grads, *x, d);
            }
            Op::L2NormalizeRows(x, eps) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let d = kernels::l2_normalize_rows_adjoint(self.value(*x).data(), gd, r, c, *eps);
                self.acc_data(grads, *x, d);
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                per_column,
                normalized,
                inv_std,
            } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let gam = self.value(*gamma).data();
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gy = vec![T::zero(); r * c];
                for i in 0..r * c {
                    let ch = i % c;
                    dg[ch] += gd[i] * normalized[i];
                    dbeta[ch] += gd[i];
                    gy[i] = gd[i] * gam[ch];
                }
                self.acc_data(grads, *gamma, dg);
                self.acc_data(grads, *beta, dbeta);
                if self.is_tracked(*x) {
                    let dx = kernels::normalize_axis_adjoint(normalized, inv_std, &gy, r, c, *per_column);
                    self.acc_data(grads, *x, dx);
                }
            }
            Op::Sample { fmap, taps } => {
                let (c, h, w) = (self.shape(*fmap)[0], self.shape(*fmap)[1], self.shape(*fmap)[2]);
                let plane = h * w;
                let mut d = vec![T::zero(); c * plane];
                for (p, tp) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = gd[p * c + ch];
                        for &(i, wt) in tp {
                            if wt != 0.0 {
                                d[ch * plane + i] += gv.scale(wt);
                            }
                        }
                    }
                }
                self.acc_data(grads, *fmap, d);
            }
            Op::Upsample { x, taps } => {
                let s = self.shape(*x);
                let d = kernels::apply_taps_adjoint(gd, s[0], s[1] * s[2], taps);
                self.acc_data(grads, *x, d);
            }
            Op::Conv3x3(x, wt, b) => {
                let s = self.shape(*x);
                let (cin, h, w) = (s[0], s[1], s[2]);
                let cout = out.shape()[0];
                let (dx, dw, db) =
                    kernels::conv3x3_adjoint(self.value(*x).data(), self.value(*wt).data(), gd, cin, cout, h, w);
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *wt, dw);
                self.acc_data(grads, *b, db);
            }
            Op::Blur { x, kernel } => {
                let (h, w) = (out.shape()[0], out.shape()[1]);
                let d = kernels::blur_plane_adjoint(gd, h, w, kernel);
                self.acc_data(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_data(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&gd[i * total + start..i * total + start + c]);
                    }
                    self.acc_data(grads, p, d);
                    start += c;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.acc_data(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = out.shape()[1];
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::GatherRows(table, idx) => {
                let c = self.shape(*table)[1];
                let mut d = vec![T::zero(); self.value(*table).len()];
                for (row, &i) in idx.iter().enumerate() {
                    for ch in 0..c {
                        d[i * c + ch] += gd[row * c + ch];
                    }
                }
                self.acc_data(grads, *table, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn product_rule_on_scalars() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(-2.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).item(), -2.0);
        assert_eq!(g.get(y).item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let unused = tape.leaf(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(unused).is_none());
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[5., 7.]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[5.0, 7.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));
        let a = tape.constant(t(&[1, 1], &[2.0]));
        let d = tape.constant(t(&[1, 1], &[3.0]));
        let e = tape.matmul(a, d).unwrap();
        assert_eq!(tape.value(e).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_col_rejects_nonpositive_tau() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.softmax_col(a, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(tape.softmax_col(a, -1.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn instance_norm_on_empty_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([4]));
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        assert!(tape.instance_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -1.2, 2.5, 0.7]));
        let s = tape.softmax_col(x, 0.1).unwrap();
        let e = tape.gelu(s);
        let m = tape.mul(e, x).unwrap();
        let l = tape.sum(m);
        let a = tape.backward(l).unwrap().get(x);
        let b = tape.backward(l).unwrap().get(x);
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }
}
