//! Row-major run-length encoding of binary masks.
//!
//! `counts` alternates background and foreground runs, starting with
//! background; a mask whose first pixel is foreground starts with a zero.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    /// `[height, width]`.
    pub shape: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Self {
        let (h, w) = mask.shape();
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0;
        for &v in mask.data() {
            if v != current {
                counts.push(run);
                current = v;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Self { shape: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.shape;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(Error::Task(format!(
                "rle counts sum to {total}, shape {h}x{w} needs {}",
                h * w
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c));
        }
        Mask::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        let m = Mask::new(2, 3, vec![0, 0, 1, 1, 1, 0]).unwrap();
        assert_eq!(Rle::encode(&m).counts, vec![2, 3, 1]);
        let m = Mask::new(1, 3, vec![1, 0, 0]).unwrap();
        assert_eq!(Rle::encode(&m).counts, vec![0, 1, 2]);
        assert_eq!(Rle::encode(&Mask::empty(2, 2)).counts, vec![4]);
    }

    #[test]
    fn wrong_total_is_rejected() {
        let r = Rle {
            shape: [2, 2],
            counts: vec![1, 2],
        };
        assert!(r.decode().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(0u8..2, 144)) {
            let m = Mask::new(h, w, bits[..h * w].to_vec()).unwrap();
            let r = Rle::encode(&m);
            prop_assert_eq!(r.counts.iter().sum::<usize>(), h * w);
            prop_assert_eq!(r.decode().unwrap(), m);
        }
    }
}
