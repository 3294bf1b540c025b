//! Synthetic abdominal-like volumes.
//!
//! Each organ family is an elliptical blob whose centre and radii drift
//! smoothly from slice to slice. Distractor blobs share the organ's
//! intensity band but are never part of its mask. Geometry and pixel noise
//! come from separate random streams, so the noiseless rendering can be
//! regenerated exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use metaseg_autodiff::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use super::volume::{chunk, ChunkedVolume};
use crate::error::{Error, Result};
use crate::rng::{purpose_stream, Purpose, Rng};

pub const BACKGROUND: f64 = 0.05;
pub const BODY: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 400;
const LAYOUT_ATTEMPTS: usize = 50;

/// Generator parameters for one organ family. Lengths are fractions of
/// the slice size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganFamilySpec {
    pub name: String,
    pub center_x: [f64; 2],
    pub center_y: [f64; 2],
    pub radius_x: [f64; 2],
    pub radius_y: [f64; 2],
    pub intensity: [f64; 2],
    /// Centre drift amplitude across the volume; radii vary by twice this, relatively.
    pub deform: f64,
    pub distractors: usize,
    pub noise: f64,
}

impl OrganFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("family `{}`: {what}", self.name)));
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.name.is_empty() {
            return bad("empty name");
        }
        if !(self.radius_x[0] > 0.0 && self.radius_y[0] > 0.0) || !ordered(self.radius_x) || !ordered(self.radius_y) {
            return bad("radii must be positive ordered ranges");
        }
        if !(0.0..=1.0).contains(&self.intensity[0])
            || !(0.0..=1.0).contains(&self.intensity[1])
            || !ordered(self.intensity)
        {
            return bad("intensity band must lie within [0, 1]");
        }
        for r in [self.center_x, self.center_y] {
            if !ordered(r) || r[0] < 0.0 || r[1] > 1.0 {
                return bad("centre ranges must lie within [0, 1]");
            }
        }
        if !(self.deform >= 0.0 && self.noise >= 0.0) {
            return bad("deform and noise must be nonnegative");
        }
        Ok(())
    }
}

/// Four abdominal stand-ins: a large liver, a spleen, and two kidneys that
/// share an intensity band and differ only by position.
pub fn default_families() -> Vec<OrganFamilySpec> {
    let fam = |name: &str, cx, cy, rx, ry, band| OrganFamilySpec {
        name: name.into(),
        center_x: cx,
        center_y: cy,
        radius_x: rx,
        radius_y: ry,
        intensity: band,
        deform: 0.03,
        distractors: 1,
        noise: 0.04,
    };
    vec![
        fam(
            "liver",
            [0.28, 0.34],
            [0.32, 0.4],
            [0.12, 0.15],
            [0.1, 0.12],
            [0.55, 0.62],
        ),
        fam(
            "spleen",
            [0.68, 0.74],
            [0.3, 0.38],
            [0.07, 0.09],
            [0.08, 0.1],
            [0.7, 0.78],
        ),
        fam(
            "kidney_l",
            [0.66, 0.74],
            [0.66, 0.74],
            [0.06, 0.07],
            [0.07, 0.08],
            [0.86, 0.94],
        ),
        fam(
            "kidney_r",
            [0.26, 0.34],
            [0.66, 0.74],
            [0.06, 0.07],
            [0.07, 0.08],
            [0.86, 0.94],
        ),
    ]
}

/// Elliptical blob whose pose is a smooth function of the slice index.
#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    intensity: f64,
    deform: f64,
    amp: [f64; 3],
    phase: [f64; 3],
}

impl Blob {
    fn pose(&self, s: usize, n: usize) -> (f64, f64, f64, f64) {
        let t = 2.0 * PI * s as f64 / n as f64;
        let wave = |k: usize| self.amp[k] * (t + self.phase[k]).sin();
        let cx = self.cx + self.deform * wave(0);
        let cy = self.cy + self.deform * wave(1);
        let scale = 1.0 + 2.0 * self.deform * wave(2);
        (cx, cy, self.rx * scale, self.ry * scale)
    }

    /// Radius of a circle that contains the blob on every slice.
    fn reach(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + 2.0 * self.deform) + self.deform
    }

    fn contains(&self, s: usize, n: usize, x: f64, y: f64) -> bool {
        let (cx, cy, rx, ry) = self.pose(s, n);
        let (dx, dy) = (x - cx, y - cy);
        let (c, sn) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * sn) / rx;
        let v = (-dx * sn + dy * c) / ry;
        u * u + v * v <= 1.0
    }
}

fn draw(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn make_blob(rng: &mut Rng, f: &OrganFamilySpec, cx: f64, cy: f64, shrink: f64) -> Blob {
    Blob {
        cx,
        cy,
        rx: draw(rng, f.radius_x) * shrink,
        ry: draw(rng, f.radius_y) * shrink,
        angle: rng.random_range(-0.5..0.5),
        intensity: draw(rng, f.intensity),
        deform: f.deform,
        amp: [0; 3].map(|_| rng.random_range(0.5..1.0)),
        phase: [0; 3].map(|_| rng.random_range(0.0..2.0 * PI)),
    }
}

fn fits(b: &Blob, placed: &[Blob]) -> bool {
    let r = b.reach();
    let inside_frame = [b.cx, b.cy].iter().all(|&c| c - r >= 0.02 && c + r <= 0.98);
    inside_frame
        && placed.iter().all(|p| {
            let d = ((b.cx - p.cx).powi(2) + (b.cy - p.cy).powi(2)).sqrt();
            d > b.reach() + p.reach() + 0.01
        })
}

const BODY_RX: f64 = 0.47;
const BODY_RY: f64 = 0.45;

struct Layout {
    organs: Vec<(String, Blob)>,
    distractors: Vec<Blob>,
}

/// Places all blobs, restarting from scratch when one finds no room.
fn layout(families: &[OrganFamilySpec], rng: &mut Rng) -> Result<Layout> {
    let mut last = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        match try_layout(families, rng) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn try_layout(families: &[OrganFamilySpec], rng: &mut Rng) -> Result<Layout> {
    let mut placed: Vec<Blob> = Vec::new();
    let mut organs = Vec::new();
    for f in families {
        let blob = (0..PLACEMENT_ATTEMPTS)
            .map(|_| {
                let (cx, cy) = (draw(rng, f.center_x), draw(rng, f.center_y));
                make_blob(rng, f, cx, cy, 1.0)
            })
            .find(|b| fits(b, &placed))
            .ok_or_else(|| Error::Generation(format!("no room for organ `{}`", f.name)))?;
        placed.push(blob);
        organs.push((f.name.clone(), blob));
    }
    let mut distractors = Vec::new();
    for f in families {
        for i in 0..f.distractors {
            let blob = (0..PLACEMENT_ATTEMPTS)
                .map(|_| {
                    let (cx, cy) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
                    make_blob(rng, f, cx, cy, 0.7)
                })
                .find(|b| fits(b, &placed))
                .ok_or_else(|| Error::Generation(format!("no room for distractor {i} of `{}`", f.name)))?;
            placed.push(blob);
            distractors.push(blob);
        }
    }
    Ok(Layout { organs, distractors })
}

fn in_body(x: f64, y: f64) -> bool {
    ((x - 0.5) / BODY_RX).powi(2) + ((y - 0.5) / BODY_RY).powi(2) <= 1.0
}

/// Noiseless rendering of slice `s`, plus each organ's mask.
fn render(l: &Layout, s: usize, n: usize, size: usize) -> (Vec<f64>, Vec<Mask>) {
    let mut img = vec![BACKGROUND; size * size];
    let mut masks: Vec<Vec<u8>> = vec![vec![0; size * size]; l.organs.len()];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            let k = i * size + j;
            if in_body(x, y) {
                img[k] = BODY;
            }
            for b in &l.distractors {
                if b.contains(s, n, x, y) {
                    img[k] = b.intensity;
                }
            }
            for (o, (_, b)) in l.organs.iter().enumerate() {
                if b.contains(s, n, x, y) {
                    img[k] = b.intensity;
                    masks[o][k] = 1;
                }
            }
        }
    }
    let masks = masks
        .into_iter()
        .map(|m| Mask::new(size, size, m).expect("binary by construction"))
        .collect();
    (img, masks)
}

fn validate(families: &[OrganFamilySpec], n_slices: usize, size: usize) -> Result<()> {
    if families.is_empty() {
        return Err(Error::Config("at least one organ family is required".into()));
    }
    if n_slices == 0 || size < 4 {
        return Err(Error::Config(format!(
            "need at least one slice of at least 4×4 pixels, got {n_slices} slices of {size}²"
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for f in families {
        f.validate()?;
        if !seen.insert(&f.name) {
            return Err(Error::Config(format!("duplicate family `{}`", f.name)));
        }
    }
    Ok(())
}

/// Volume with every family present, chunked into twelve.
pub fn gen_volume(families: &[OrganFamilySpec], n_slices: usize, size: usize, seed: u64) -> Result<ChunkedVolume> {
    gen_volume_with(families, n_slices, size, 12, seed, true)
}

/// Noiseless counterpart of [`gen_volume`] with the same geometry.
pub fn gen_volume_clean(
    families: &[OrganFamilySpec],
    n_slices: usize,
    size: usize,
    seed: u64,
) -> Result<ChunkedVolume> {
    gen_volume_with(families, n_slices, size, 12, seed, false)
}

pub fn gen_volume_with(
    families: &[OrganFamilySpec],
    n_slices: usize,
    size: usize,
    n_chunks: usize,
    seed: u64,
    noisy: bool,
) -> Result<ChunkedVolume> {
    validate(families, n_slices, size)?;
    let l = layout(families, &mut purpose_stream(seed, Purpose::Geometry, &[]))?;
    let sigma = families.iter().map(|f| f.noise).fold(0.0, f64::max);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut nrng = purpose_stream(seed, Purpose::Noise, &[]);
    let mut slices = Vec::with_capacity(n_slices);
    let mut organs: BTreeMap<String, Vec<Mask>> = BTreeMap::new();
    for s in 0..n_slices {
        let (mut img, masks) = render(&l, s, n_slices, size);
        if noisy && sigma > 0.0 {
            for v in &mut img {
                *v += noise.sample(&mut nrng);
            }
        }
        // Stored at f32 precision so that the f32 file format round-trips exactly.
        let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64).collect();
        slices.push(Tensor::new([size, size], data)?);
        for ((name, _), m) in l.organs.iter().zip(masks) {
            organs.entry(name.clone()).or_default().push(m);
        }
    }
    let chunks = chunk(n_slices, n_chunks)?.chunks;
    Ok(ChunkedVolume {
        id: format!("vol-{seed}"),
        slices,
        organs,
        chunks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let f = default_families();
        let a = gen_volume(&f, 12, 32, 3).unwrap();
        let b = gen_volume(&f, 12, 32, 3).unwrap();
        let c = gen_volume(&f, 12, 32, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.slices, c.slices);
    }

    #[test]
    fn zero_deform_gives_static_masks() {
        let mut f = default_families();
        for s in &mut f {
            s.deform = 0.0;
        }
        let v = gen_volume(&f, 9, 32, 1).unwrap();
        for masks in v.organs.values() {
            assert!(masks.iter().all(|m| m == &masks[0]));
        }
    }

    #[test]
    fn masks_sit_inside_intensity_bands() {
        let f = default_families();
        let v = gen_volume_clean(&f, 12, 48, 8).unwrap();
        for spec in &f {
            let masks = v.masks(&spec.name).unwrap();
            for (img, m) in v.slices.iter().zip(masks) {
                assert!(!m.is_empty());
                for (k, &on) in m.data().iter().enumerate() {
                    if on == 1 {
                        let x = img.data()[k];
                        let band = spec.intensity;
                        assert!(x >= band[0] as f32 as f64 && x <= band[1] as f32 as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn overcrowding_is_a_generation_error() {
        let mut f = default_families();
        f[0].radius_x = [0.45, 0.45];
        f[0].radius_y = [0.45, 0.45];
        assert!(matches!(gen_volume(&f, 4, 32, 0), Err(Error::Generation(_))));
    }
}
