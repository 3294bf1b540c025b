//! Chunked volumes and the one-shot episode protocol.

use std::collections::BTreeMap;

use metaseg_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use crate::error::{Error, Result};

/// Contiguous slice range `[start, end)` with its support slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub support: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.start..self.end).contains(&k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunking {
    pub chunks: Vec<Chunk>,
    /// Set when there were fewer slices than requested chunks.
    pub degraded: bool,
}

/// Near-equal contiguous partition of `n_slices` into `n_chunks`.
///
/// Sizes differ by at most one; the longer chunks come last. The support is
/// the centre slice (lower median for even lengths). With fewer slices than
/// chunks every slice becomes its own chunk.
pub fn chunk(n_slices: usize, n_chunks: usize) -> Result<Chunking> {
    if n_chunks < 1 {
        return Err(Error::Tensor(metaseg_autodiff::Error::Parameter {
            op: "chunk",
            name: "n_chunks",
            value: n_chunks as f64,
        }));
    }
    if n_slices == 0 {
        return Err(Error::Tensor(metaseg_autodiff::Error::EmptyInput { op: "chunk" }));
    }
    let degraded = n_slices < n_chunks;
    if degraded {
        tracing::warn!(n_slices, n_chunks, "fewer slices than chunks; using singletons");
    }
    let k = n_chunks.min(n_slices);
    let base = n_slices / k;
    let rem = n_slices % k;
    let mut chunks = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i >= k - rem);
        chunks.push(Chunk {
            start,
            end: start + len,
            support: start + (len - 1) / 2,
        });
        start += len;
    }
    Ok(Chunking { chunks, degraded })
}

/// Synthetic scan: slices in `[0,1]`, one mask stack per organ, chunk layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedVolume {
    pub id: String,
    pub slices: Vec<Tensor>,
    pub organs: BTreeMap<String, Vec<Mask>>,
    pub chunks: Vec<Chunk>,
}

impl ChunkedVolume {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.slices[0].shape();
        (s[0], s[1])
    }

    pub fn organ_names(&self) -> Vec<String> {
        self.organs.keys().cloned().collect()
    }

    pub fn masks(&self, organ: &str) -> Result<&[Mask]> {
        self.organs
            .get(organ)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("organ `{organ}` not in volume `{}`", self.id)))
    }

    pub fn slice(&self, k: usize) -> Result<&Tensor> {
        self.slices.get(k).ok_or_else(|| {
            Error::Lookup(format!(
                "slice {k} out of range for volume `{}` ({} slices)",
                self.id,
                self.slices.len()
            ))
        })
    }

    pub fn rechunk(&mut self, n_chunks: usize) -> Result<bool> {
        let c = chunk(self.n_slices(), n_chunks)?;
        self.chunks = c.chunks;
        Ok(c.degraded)
    }

    pub fn chunk_of(&self, k: usize) -> Option<usize> {
        self.chunks.iter().position(|c| c.contains(k))
    }
}

/// One slice with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: Tensor,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub organ: String,
    pub volume: String,
    pub chunk: usize,
    pub support: Sample,
    pub queries: Vec<Sample>,
    /// The chunk had one slice, so the support doubles as the query.
    pub singleton: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub chunk: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSet {
    pub episodes: Vec<Episode>,
    pub skipped: Vec<Skipped>,
}

fn sample(v: &ChunkedVolume, masks: &[Mask], k: usize) -> Sample {
    Sample {
        index: k,
        image: v.slices[k].clone(),
        mask: masks[k].clone(),
    }
}

/// One episode per chunk: the support slice conditions the remaining slices.
/// Chunks whose support mask is empty are skipped and reported.
pub fn make_episodes(v: &ChunkedVolume, organ: &str) -> Result<EpisodeSet> {
    let masks = v.masks(organ)?;
    let mut episodes = Vec::new();
    let mut skipped = Vec::new();
    for (ci, c) in v.chunks.iter().enumerate() {
        if masks[c.support].is_empty() {
            skipped.push(Skipped {
                chunk: ci,
                reason: format!("support slice {} has an empty `{organ}` mask", c.support),
            });
            continue;
        }
        let singleton = c.len() == 1;
        let queries = if singleton {
            vec![sample(v, masks, c.support)]
        } else {
            (c.start..c.end)
                .filter(|&k| k != c.support)
                .map(|k| sample(v, masks, k))
                .collect()
        };
        episodes.push(Episode {
            organ: organ.to_string(),
            volume: v.id.clone(),
            chunk: ci,
            support: sample(v, masks, c.support),
            queries,
            singleton,
        });
    }
    Ok(EpisodeSet { episodes, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_six_into_twelve() {
        let c = chunk(36, 12).unwrap();
        assert!(!c.degraded);
        assert_eq!(c.chunks.len(), 12);
        for (i, ch) in c.chunks.iter().enumerate() {
            assert_eq!((ch.start, ch.end, ch.support), (3 * i, 3 * i + 3, 3 * i + 1));
        }
    }

    #[test]
    fn singletons() {
        let c = chunk(12, 12).unwrap();
        assert!(c.chunks.iter().all(|ch| ch.len() == 1 && ch.support == ch.start));
        let d = chunk(5, 12).unwrap();
        assert!(d.degraded);
        assert_eq!(d.chunks.len(), 5);
    }

    #[test]
    fn even_chunk_uses_lower_median() {
        let c = chunk(37, 12).unwrap();
        let last = c.chunks[11];
        assert_eq!((last.start, last.end, last.support), (33, 37, 34));
    }

    #[test]
    fn zero_chunks_is_a_parameter_error() {
        assert!(chunk(10, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn chunks_partition_the_volume(n in 1usize..120, k in 1usize..20) {
            let c = chunk(n, k).unwrap();
            proptest::prop_assert_eq!(c.chunks.len(), k.min(n));
            proptest::prop_assert_eq!(c.degraded, n < k);
            proptest::prop_assert_eq!(c.chunks[0].start, 0);
            proptest::prop_assert_eq!(c.chunks.last().unwrap().end, n);
            for w in c.chunks.windows(2) {
                proptest::prop_assert_eq!(w[0].end, w[1].start);
                proptest::prop_assert!(w[0].len() <= w[1].len());
            }
            let lens: Vec<usize> = c.chunks.iter().map(Chunk::len).collect();
            proptest::prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            for ch in &c.chunks {
                proptest::prop_assert_eq!(ch.support, ch.start + (ch.len() - 1) / 2);
            }
        }
    }
}
