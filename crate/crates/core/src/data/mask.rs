use metaseg_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask, row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Config(format!(
                "mask {h}×{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Config("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|k| f(k / w, k % w) as u8).collect();
        Self { h, w, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([self.h, self.w], |k| self.data[k] as f64)
    }

    /// Thresholds a real-valued map: `v >= threshold` is foreground.
    pub fn from_threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = t.dims2("mask")?;
        Ok(Self {
            h,
            w,
            data: t.data().iter().map(|&v| (v >= threshold) as u8).collect(),
        })
    }
}

/// Dice similarity `2|m∩g| / (|m|+|g|)`. Two empty masks score 1.
pub fn dsc(m: &Mask, g: &Mask) -> Result<f64> {
    if m.shape() != g.shape() {
        return Err(Error::Tensor(metaseg_autodiff::Error::Dimension {
            op: "dsc",
            lhs: vec![m.h, m.w],
            rhs: vec![g.h, g.w],
        }));
    }
    let inter: usize = m.data.iter().zip(&g.data).map(|(&a, &b)| (a & b) as usize).sum();
    let total = m.count() + g.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_examples() {
        let a = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = Mask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let c = Mask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &c).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert!(dsc(&a, &Mask::empty(2, 2)).is_err());
    }

    #[test]
    fn threshold_tie_is_foreground() {
        let t = Tensor::new([1, 3], vec![0.4, 0.5, 0.6]).unwrap();
        assert_eq!(Mask::from_threshold(&t, 0.5).unwrap().data(), &[0, 1, 1]);
    }

    #[test]
    fn rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(2, 2, vec![0, 1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn dsc_is_symmetric_and_bounded(bits in proptest::collection::vec(0u8..2, 60), other in proptest::collection::vec(0u8..2, 60)) {
            let a = Mask::new(6, 10, bits).unwrap();
            let b = Mask::new(6, 10, other).unwrap();
            let d = dsc(&a, &b).unwrap();
            proptest::prop_assert_eq!(d, dsc(&b, &a).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            let inverse = Mask::from_fn(6, 10, |i, j| !a.get(i, j));
            if !a.is_empty() && !inverse.is_empty() {
                proptest::prop_assert_eq!(dsc(&a, &inverse).unwrap(), 0.0);
            }
        }
    }
}
