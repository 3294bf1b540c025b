//! Raw forward kernels and their adjoints on flat row-major buffers.
//!
//! The tape records which kernel produced a node; backward calls the
//! matching adjoint here. Shapes are validated by the caller.

use crate::real::Real;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `g[m×n] · bᵀ` for `b[k×n]`, giving `[m×k]`.
pub fn matmul_bt<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for (orow, grow) in out.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `aᵀ · g` for `a[m×k]`, `g[m×n]`, giving `[k×n]`.
pub fn matmul_at<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (ov, &gv) in orow.iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
    out
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let inner = (x + x * x * x * T::from_f64(GELU_C)).scale(GELU_K);
    x * (T::one() + inner.tanh()).scale(0.5)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let inner = (x + x * x * x * T::from_f64(GELU_C)).scale(GELU_K);
    let t = inner.tanh();
    let dinner = (T::one() + x * x * T::from_f64(3.0 * GELU_C)).scale(GELU_K);
    (T::one() + t).scale(0.5) + x * (T::one() - t * t) * dinner.scale(0.5)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    let neg_abs = if x.re() >= 0.0 { -x } else { x };
    let pos = if x.re() > 0.0 { x } else { T::zero() };
    pos + (T::one() + neg_abs.exp()).ln()
}

/// Softmax over each row of `x[r×c]`.
pub fn softmax_rows<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(row[0], T::max_re);
        let mut z = T::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}

pub fn softmax_rows_adjoint<T: Real>(s: &[T], g: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let mut dot = T::zero();
        for j in 0..c {
            dot += g[i * c + j] * s[i * c + j];
        }
        for j in 0..c {
            out[i * c + j] = s[i * c + j] * (g[i * c + j] - dot);
        }
    }
    out
}

/// Softmax of `x/τ` over each column of `x[r×c]`.
pub fn softmax_cols<T: Real>(x: &[T], r: usize, c: usize, tau: f64) -> Vec<T> {
    let inv = 1.0 / tau;
    let mut out = vec![T::zero(); r * c];
    for j in 0..c {
        let mut m = x[j];
        for i in 1..r {
            m = m.max_re(x[i * c + j]);
        }
        let mut z = T::zero();
        for i in 0..r {
            let e = (x[i * c + j] - m).scale(inv).exp();
            out[i * c + j] = e;
            z += e;
        }
        for i in 0..r {
            out[i * c + j] /= z;
        }
    }
    out
}

pub fn softmax_cols_adjoint<T: Real>(s: &[T], g: &[T], r: usize, c: usize, tau: f64) -> Vec<T> {
    let inv = 1.0 / tau;
    let mut out = vec![T::zero(); r * c];
    for j in 0..c {
        let mut dot = T::zero();
        for i in 0..r {
            dot += g[i * c + j] * s[i * c + j];
        }
        for i in 0..r {
            out[i * c + j] = (s[i * c + j] * (g[i * c + j] - dot)).scale(inv);
        }
    }
    out
}

/// Row-wise `x / (‖x‖ + eps)`.
pub fn l2_normalize_rows<T: Real>(x: &[T], r: usize, c: usize, eps: f64) -> Vec<T> {
    let mut out = x.to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let n2: T = row.iter().map(|&v| v * v).sum();
        let d = sqrt_or_zero(n2) + T::from_f64(eps);
        for v in row.iter_mut() {
            *v /= d;
        }
    }
    out
}

pub fn l2_normalize_rows_adjoint<T: Real>(x: &[T], g: &[T], r: usize, c: usize, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let xr = &x[i * c..(i + 1) * c];
        let gr = &g[i * c..(i + 1) * c];
        let n2: T = xr.iter().map(|&v| v * v).sum();
        let n = sqrt_or_zero(n2);
        let d = n + T::from_f64(eps);
        let or = &mut out[i * c..(i + 1) * c];
        if n.re() == 0.0 {
            for (o, &gv) in or.iter_mut().zip(gr) {
                *o = gv / d;
            }
            continue;
        }
        let xg: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        let k = xg / (n * d * d);
        for ((o, &gv), &xv) in or.iter_mut().zip(gr).zip(xr) {
            *o = gv / d - xv * k;
        }
    }
    out
}

#[inline]
fn sqrt_or_zero<T: Real>(v: T) -> T {
    if v.re() > 0.0 {
        v.sqrt()
    } else {
        T::zero()
    }
}

/// Normalization statistics along one axis of an `r×c` matrix.
///
/// `per_column = true` normalizes each column over its `r` entries
/// (instance norm over spatial positions); otherwise each row over its `c`
/// entries (layer norm over channels). Returns `(normalized, inv_std)`.
pub fn normalize_axis<T: Real>(x: &[T], r: usize, c: usize, eps: f64, per_column: bool) -> (Vec<T>, Vec<T>) {
    let (groups, len) = if per_column { (c, r) } else { (r, c) };
    let idx = |g: usize, k: usize| if per_column { k * c + g } else { g * c + k };
    let mut y = vec![T::zero(); r * c];
    let mut inv_std = Vec::with_capacity(groups);
    let n = len as f64;
    for g in 0..groups {
        let mut mean = T::zero();
        for k in 0..len {
            mean += x[idx(g, k)];
        }
        mean = mean.scale(1.0 / n);
        let mut var = T::zero();
        for k in 0..len {
            let d = x[idx(g, k)] - mean;
            var += d * d;
        }
        var = var.scale(1.0 / n);
        let is = T::one() / (var + T::from_f64(eps)).sqrt();
        for k in 0..len {
            y[idx(g, k)] = (x[idx(g, k)] - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

/// Adjoint of [`normalize_axis`] with respect to its input, given the
/// gradient `gy` on the normalized values.
pub fn normalize_axis_adjoint<T: Real>(
    y: &[T],
    inv_std: &[T],
    gy: &[T],
    r: usize,
    c: usize,
    per_column: bool,
) -> Vec<T> {
    let (groups, len) = if per_column { (c, r) } else { (r, c) };
    let idx = |g: usize, k: usize| if per_column { k * c + g } else { g * c + k };
    let n = len as f64;
    let mut dx = vec![T::zero(); r * c];
    for (g, &is) in inv_std.iter().enumerate().take(groups) {
        let mut mg = T::zero();
        let mut mgy = T::zero();
        for k in 0..len {
            let i = idx(g, k);
            mg += gy[i];
            mgy += gy[i] * y[i];
        }
        mg = mg.scale(1.0 / n);
        mgy = mgy.scale(1.0 / n);
        for k in 0..len {
            let i = idx(g, k);
            dx[i] = is * (gy[i] - mg - y[i] * mgy);
        }
    }
    dx
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable blur of an `h×w` plane with replicate padding.
pub fn blur_plane<T: Real>(x: &[T], h: usize, w: usize, kernel: &[f64]) -> Vec<T> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = clamp_idx(j as i64 + t as i64 - r, w);
                acc += x[i * w + jj].scale(kv);
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = clamp_idx(i as i64 + t as i64 - r, h);
                acc += tmp[ii * w + j].scale(kv);
            }
            out[i * w + j] = acc;
        }
    }
    out
}

pub fn blur_plane_adjoint<T: Real>(g: &[T], h: usize, w: usize, kernel: &[f64]) -> Vec<T> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let gv = g[i * w + j];
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = clamp_idx(i as i64 + t as i64 - r, h);
                tmp[ii * w + j] += gv.scale(kv);
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let gv = tmp[i * w + j];
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = clamp_idx(j as i64 + t as i64 - r, w);
                out[i * w + jj] += gv.scale(kv);
            }
        }
    }
    out
}

/// One interpolation tap: flat spatial index and weight.
pub type Tap = (usize, f64);

/// Align-corners bilinear taps for a normalized point on an `h×w` grid.
///
/// Positions within 1e-9 of an integer snap to it, so grid points hit
/// stored values exactly.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Tap; 4] {
    let axis = |u: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let mut g = u * (n - 1) as f64;
        let r = g.round();
        if (g - r).abs() < 1e-9 {
            g = r;
        }
        let i0 = (g.floor() as usize).min(n - 2);
        (i0, i0 + 1, g - i0 as f64)
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Upsampling taps from an `h×w` grid to an `out_h×out_w` grid.
pub fn upsample_taps(h: usize, w: usize, out_h: usize, out_w: usize, bilinear: bool) -> Vec<[Tap; 4]> {
    let mut taps = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            if bilinear {
                let y = if out_h > 1 { i as f64 / (out_h - 1) as f64 } else { 0.0 };
                let x = if out_w > 1 { j as f64 / (out_w - 1) as f64 } else { 0.0 };
                taps.push(bilinear_taps(x, y, h, w));
            } else {
                let si = (i * h / out_h).min(h - 1);
                let sj = (j * w / out_w).min(w - 1);
                let s = si * w + sj;
                taps.push([(s, 1.0), (s, 0.0), (s, 0.0), (s, 0.0)]);
            }
        }
    }
    taps
}

/// Gathers each channel of `x[c×plane]` through `taps`.
pub fn apply_taps<T: Real>(x: &[T], c: usize, plane: usize, taps: &[[Tap; 4]]) -> Vec<T> {
    let out_plane = taps.len();
    let mut out = vec![T::zero(); c * out_plane];
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        for (o, tp) in taps.iter().enumerate() {
            let mut acc = T::zero();
            for &(idx, wt) in tp {
                if wt != 0.0 {
                    acc += src[idx].scale(wt);
                }
            }
            out[ch * out_plane + o] = acc;
        }
    }
    out
}

pub fn apply_taps_adjoint<T: Real>(g: &[T], c: usize, plane: usize, taps: &[[Tap; 4]]) -> Vec<T> {
    let out_plane = taps.len();
    let mut dx = vec![T::zero(); c * plane];
    for ch in 0..c {
        let dst = &mut dx[ch * plane..(ch + 1) * plane];
        for (o, tp) in taps.iter().enumerate() {
            let gv = g[ch * out_plane + o];
            for &(idx, wt) in tp {
                if wt != 0.0 {
                    dst[idx] += gv.scale(wt);
                }
            }
        }
    }
    dx
}

/// Replicate-padded copy of an `h×w` plane, `(h+2)×(w+2)`.
fn pad_into<T: Real>(x: &[T], h: usize, w: usize, out: &mut [T]) {
    let pw = w + 2;
    for pi in 0..h + 2 {
        let si = pi.saturating_sub(1).min(h - 1);
        let row = &x[si * w..(si + 1) * w];
        let dst = &mut out[pi * pw..(pi + 1) * pw];
        dst[0] = row[0];
        dst[1..=w].copy_from_slice(row);
        dst[w + 1] = row[w - 1];
    }
}

/// Adjoint of [`pad_into`]: border entries fold back onto the edge pixels.
fn unpad_add<T: Real>(p: &[T], h: usize, w: usize, dst: &mut [T]) {
    let pw = w + 2;
    for pi in 0..h + 2 {
        let si = pi.saturating_sub(1).min(h - 1);
        let src = &p[pi * pw..(pi + 1) * pw];
        let row = &mut dst[si * w..(si + 1) * w];
        row[0] += src[0];
        for (d, &v) in row.iter_mut().zip(&src[1..=w]) {
            *d += v;
        }
        row[w - 1] += src[w + 1];
    }
}

/// Patch matrix `[cin·9 × h·w]`: row `c·9 + tap` holds channel `c` shifted by the tap.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let (plane, pw) = (h * w, w + 2);
    let mut cols = vec![T::zero(); cin * 9 * plane];
    let mut pad = vec![T::zero(); (h + 2) * pw];
    for (c, block) in cols.chunks_exact_mut(9 * plane).enumerate() {
        pad_into(&x[c * plane..(c + 1) * plane], h, w, &mut pad);
        for (tap, row) in block.chunks_exact_mut(plane).enumerate() {
            let (ti, tj) = (tap / 3, tap % 3);
            for (i, dst) in row.chunks_exact_mut(w).enumerate() {
                dst.copy_from_slice(&pad[(i + ti) * pw + tj..][..w]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let (plane, pw) = (h * w, w + 2);
    let mut dx = vec![T::zero(); cin * plane];
    let mut dpad = vec![T::zero(); (h + 2) * pw];
    for (c, block) in cols.chunks_exact(9 * plane).enumerate() {
        dpad.fill(T::zero());
        for (tap, row) in block.chunks_exact(plane).enumerate() {
            let (ti, tj) = (tap / 3, tap % 3);
            for (i, src) in row.chunks_exact(w).enumerate() {
                for (d, &v) in dpad[(i + ti) * pw + tj..][..w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        unpad_add(&dpad, h, w, &mut dx[c * plane..(c + 1) * plane]);
    }
    dx
}

/// 3×3 convolution with replicate padding. `x[cin×h×w]`, `wt[cout×cin×3×3]`, `b[cout]`.
pub fn conv3x3<T: Real>(x: &[T], wt: &[T], b: &[T], cin: usize, cout: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = matmul(wt, &im2col(x, cin, h, w), cout, cin * 9, plane);
    for (row, &bo) in out.chunks_exact_mut(plane).zip(b) {
        for v in row {
            *v += bo;
        }
    }
    out
}

/// Gradients `(dx, dw, db)` of [`conv3x3`].
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_adjoint<T: Real>(
    x: &[T],
    wt: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (plane, kk) = (h * w, cin * 9);
    let db: Vec<T> = g.chunks_exact(plane).map(|row| row.iter().copied().sum()).collect();
    let cols = im2col(x, cin, h, w);
    let dw = matmul_bt(g, &cols, cout, kk, plane);
    let dcols = matmul_at(wt, g, cout, kk, plane);
    (col2im(&dcols, cin, h, w), dw, db)
}
