//! Outer learning-rate schedule and optimizers.

use std::f64::consts::PI;

use crate::config::OuterOptimizer;
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};

/// `η_min + ½(β₀ − η_min)(1 + cos(πe/E))` for `0 ≤ e ≤ E`.
pub fn cosine_anneal(beta0: f64, e: usize, epochs: usize, eta_min: f64) -> Result<f64> {
    if e > epochs {
        return Err(Error::Config(format!("epoch {e} is past the schedule end {epochs}")));
    }
    if epochs == 0 {
        return Ok(beta0);
    }
    let c = (PI * e as f64 / epochs as f64).cos();
    Ok(eta_min + 0.5 * (beta0 - eta_min) * (1.0 + c))
}

/// Adaptive-moment update without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    t: i32,
    m: GradMap,
    v: GradMap,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: GradMap::new(),
            v: GradMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let (c1, c2) = (1.0 - self.b1.powi(self.t), 1.0 - self.b2.powi(self.t));
        let mut updates = GradMap::new();
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let v = self.v.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let mut u = g.map(|_| 0.0);
            for (((mi, vi), ui), &gi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(u.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = self.b1 * *mi + (1.0 - self.b1) * gi;
                *vi = self.b2 * *vi + (1.0 - self.b2) * gi * gi;
                *ui = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            updates.insert(name.clone(), u);
        }
        params.sgd_step(&updates, lr)
    }
}

/// Outer optimizer state.
#[derive(Debug, Clone)]
pub enum Outer {
    Adam(Adam),
    Sgd,
}

impl Outer {
    pub fn new(kind: OuterOptimizer) -> Self {
        match kind {
            OuterOptimizer::Adam => Outer::Adam(Adam::default()),
            OuterOptimizer::Sgd => Outer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        match self {
            Outer::Adam(a) => a.step(params, grads, lr),
            Outer::Sgd => params.sgd_step(grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tag;
    use metaseg_autodiff::Tensor;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_anneal(2e-4, 0, 50, 0.0).unwrap(), 2e-4);
        assert_eq!(cosine_anneal(2e-4, 50, 50, 1e-6).unwrap(), 1e-6);
        let mid = cosine_anneal(1.0, 25, 50, 0.2).unwrap();
        assert!((mid - 0.6).abs() < 1e-15);
        assert!(cosine_anneal(1.0, 51, 50, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap(), Tag::Trainable)
            .unwrap();
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::new([2], vec![3.0, -0.5]).unwrap());
        Adam::default().step(&mut p, &g, 0.1).unwrap();
        let w = p.tensor("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7, "{w:?}");
    }

    proptest::proptest! {
        #[test]
        fn cosine_is_monotone_and_bounded(beta0 in 1e-6f64..1.0, frac in 0.0f64..1.0, epochs in 1usize..400) {
            let eta_min = beta0 * frac;
            let mut prev = f64::INFINITY;
            for e in 0..=epochs {
                let b = cosine_anneal(beta0, e, epochs, eta_min).unwrap();
                proptest::prop_assert!(b <= prev);
                proptest::prop_assert!(b >= eta_min - 1e-15 && b <= beta0 + 1e-15);
                prev = b;
            }
        }
    }
}
