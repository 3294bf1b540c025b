use metaseg_autodiff::{Dual, Error, Resize, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn unary(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v);
    tape.value(out).clone()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::randn([4, 5], 1.0, &mut rng);
    let b = Tensor::randn([5, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let c = tape.value(c);
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
            assert!((c.data()[i * 3 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_col_examples() {
    let out = unary(Tensor::full([4, 1], 3.7), |tp, v| tp.softmax_col(v, 0.1).unwrap());
    assert!(out.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    for (x, tau) in [(-40.0, 0.05), (0.0, 1.0), (12.5, 0.1)] {
        let out = unary(t(&[1, 1], &[x]), |tp, v| tp.softmax_col(v, tau).unwrap());
        assert_eq!(out.data(), &[1.0]);
    }

    let closed_form = 10f64.exp() / (10f64.exp() + 1.0);
    let out = unary(t(&[2, 1], &[1.0, 0.0]), |tp, v| tp.softmax_col(v, 0.1).unwrap());
    assert!(out.data()[0] > 0.9999);
    assert!((out.data()[0] - closed_form).abs() < 1e-15);
}

#[test]
fn l2_normalize_examples() {
    let out = unary(t(&[3, 2], &[3.0, 4.0, 0.6, 0.8, 0.0, 0.0]), |tp, v| {
        tp.l2_normalize_rows(v, 1e-12).unwrap()
    });
    let d = out.data();
    assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    assert!((d[2] - 0.6).abs() < 1e-12 && (d[3] - 0.8).abs() < 1e-12);
    assert_eq!(&d[4..], &[0.0, 0.0]);
}

fn inorm(x: Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let c = gamma.len();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(t(&[c], gamma));
    let b = tape.constant(t(&[c], beta));
    let out = tape.instance_norm(xv, g, b, 1e-5).unwrap();
    tape.value(out).clone()
}

#[test]
fn instance_norm_examples() {
    let out = inorm(Tensor::full([5, 1], 2.5), &[1.0], &[0.0]);
    assert!(out.data().iter().all(|&v| v == 0.0));

    // mean 0, var 1, so the only change is the eps in the denominator
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = inorm(t(&[2, 1], &[-1.0, 1.0]), &[1.0], &[0.0]);
    assert!((out.data()[0] + expected).abs() < 1e-12);
    assert!((out.data()[1] - expected).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = inorm(Tensor::randn([6, 2], 1.0, &mut rng), &[0.0, 0.0], &[5.0, 5.0]);
    assert!(out.data().iter().all(|&v| v == 5.0));
}

#[test]
fn instance_norm_standardizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = inorm(Tensor::randn([50, 3], 4.0, &mut rng), &[1.0; 3], &[0.0; 3]);
    for ch in 0..3 {
        let col: Vec<f64> = (0..50).map(|i| out.data()[i * 3 + ch]).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }
}

fn sample(fmap: Tensor, points: &[[f64; 2]]) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let v = tape.constant(fmap);
    let out = tape.bilinear_sample(v, points)?;
    Ok(tape.value(out).clone())
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fmap = Tensor::randn([3, 4, 5], 1.0, &mut rng);
    let out = sample(fmap.clone(), &[[0.0, 0.0]]).unwrap();
    let corner: Vec<f64> = (0..3).map(|c| fmap.data()[c * 20]).collect();
    assert_eq!(out.data(), &corner[..]);

    let out = sample(t(&[1, 2, 2], &[0., 1., 2., 3.]), &[[0.5, 0.5]]).unwrap();
    assert_eq!(out.data(), &[1.5]);

    assert!(matches!(
        sample(t(&[1, 2, 2], &[0., 1., 2., 3.]), &[[1.2, 0.5]]),
        Err(Error::Range { .. })
    ));
}

/// Direct four-corner formula, written independently of the kernel.
fn four_corner(fmap: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (fmap.shape()[1], fmap.shape()[2]);
    let gx = x * (w - 1) as f64;
    let gy = y * (h - 1) as f64;
    let x0 = (gx.floor() as usize).min(w - 2);
    let y0 = (gy.floor() as usize).min(h - 2);
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let at = |i: usize, j: usize| fmap.data()[c * h * w + i * w + j];
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1) * fx * (1.0 - fy)
        + at(y0 + 1, x0) * (1.0 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
}

#[test]
fn bilinear_matches_four_corner_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fmap = Tensor::randn([2, 6, 7], 1.0, &mut rng);
    let points: Vec<[f64; 2]> = (0..100)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let out = sample(fmap.clone(), &points).unwrap();
    for (p, &[x, y]) in points.iter().enumerate() {
        for c in 0..2 {
            assert!((out.data()[p * 2 + c] - four_corner(&fmap, c, x, y)).abs() < 1e-12);
        }
    }
}

fn blur(x: Tensor, sigma: f64) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.gaussian_blur(v, sigma)?;
    Ok(tape.value(out).clone())
}

#[test]
fn gaussian_blur_examples() {
    let c = blur(Tensor::full([7, 9], 0.42), 1.5).unwrap();
    assert!(c.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    let z = blur(Tensor::zeros([5, 5]), 2.0).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));

    // radius ceil(3σ) = 3; unnormalized weights exp(-i²/2) for i in -3..=3
    let total = 1.0 + 2.0 * ((-0.5f64).exp() + (-2.0f64).exp() + (-4.5f64).exp());
    let center = 1.0 / total;
    let mut img = Tensor::zeros([9, 9]);
    img.data_mut()[4 * 9 + 4] = 1.0;
    let out = blur(img, 1.0).unwrap();
    assert!((out.data()[4 * 9 + 4] - center * center).abs() < 1e-15);

    assert!(matches!(blur(Tensor::zeros([3, 3]), 0.0), Err(Error::Parameter { .. })));
}

#[test]
fn catalog_scalar_examples() {
    let g = unary(t(&[1], &[0.0]), |tp, v| tp.gelu(v));
    assert_eq!(g.data(), &[0.0]);
    let s = unary(t(&[1], &[0.0]), |tp, v| tp.sigmoid(v));
    assert_eq!(s.data(), &[0.5]);
    for mode in [Resize::Nearest, Resize::Bilinear] {
        let u = unary(t(&[1, 1, 1], &[2.25]), |tp, v| tp.upsample(v, 4, 4, mode).unwrap());
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert!(u.data().iter().all(|&x| x == 2.25));
    }
}

#[test]
fn dual_backward_gives_hessian_vector_product() {
    // f(x) = Σ softplus(A x)ᵢ² style composite; H·v from duals vs differences of gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::randn([4, 3], 1.0, &mut rng);
    let x0 = Tensor::randn([3, 1], 1.0, &mut rng);
    let dir = Tensor::randn([3, 1], 1.0, &mut rng);

    fn grad<T: metaseg_autodiff::Real>(a: &Tensor, x: Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::<T>::new();
        let av = tape.constant(a.lift(None));
        let xv = tape.leaf(x);
        let y = tape.matmul(av, xv).unwrap();
        let s = tape.softplus(y);
        let g = tape.gelu(s);
        let sq = tape.mul(g, s).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap().get(xv)
    }

    let hv = grad::<Dual>(&a, x0.lift(Some(&dir))).tangents();
    let h = 1e-6;
    let plus = grad::<f64>(&a, x0.zip_map(&dir, "fd", |x, d| x + h * d).unwrap());
    let minus = grad::<f64>(&a, x0.zip_map(&dir, "fd", |x, d| x - h * d).unwrap());
    for i in 0..3 {
        let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
        assert!(
            (hv.data()[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
            "{i}: {} vs {fd}",
            hv.data()[i]
        );
    }
}

proptest! {
    #[test]
    fn softmax_col_columns_sum_to_one(
        data in prop::collection::vec(-5.0f64..5.0, 12),
        tau in prop::sample::select(vec![0.05, 0.1, 1.0]),
    ) {
        let out = unary(t(&[4, 3], &data), |tp, v| tp.softmax_col(v, tau).unwrap());
        for j in 0..3 {
            let s: f64 = (0..4).map(|i| out.data()[i * 3 + j]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_rows_are_unit_or_zero(data in prop::collection::vec(-3.0f64..3.0, 15)) {
        let out = unary(t(&[5, 3], &data), |tp, v| tp.l2_normalize_rows(v, 1e-12).unwrap());
        for i in 0..5 {
            let n: f64 = out.data()[i * 3..i * 3 + 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            let zero = data[i * 3..i * 3 + 3].iter().all(|&v| v == 0.0);
            prop_assert!(zero || (n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn blur_kernel_is_normalized(sigma in 0.2f64..4.0, value in 0.0f64..1.0) {
        let k = metaseg_autodiff::kernels::gaussian_kernel(sigma);
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let out = blur(Tensor::full([6, 5], value), sigma).unwrap();
        prop_assert!(out.data().iter().all(|&v| (v - value).abs() <= 1e-9));
    }

    #[test]
    fn blur_keeps_unit_interval(data in prop::collection::vec(0.0f64..=1.0, 30), sigma in 0.3f64..3.0) {
        let out = blur(t(&[5, 6], &data), sigma).unwrap();
        prop_assert!(out.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn bilinear_grid_points_are_exact(
        h in 1usize..7, w in 1usize..7, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fmap = Tensor::randn([2, h, w], 1.0, &mut rng);
        let norm = |k: usize, n: usize| if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
        let points: Vec<[f64; 2]> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| [norm(j, w), norm(i, h)])
            .collect();
        let out = sample(fmap.clone(), &points).unwrap();
        for (p, k) in (0..h * w).enumerate() {
            for c in 0..2 {
                prop_assert_eq!(out.data()[p * 2 + c].to_bits(), fmap.data()[c * h * w + k].to_bits());
            }
        }
    }
}
