//! Independent random streams keyed by purpose.
//!
//! Every consumer of randomness asks for its own stream, addressed by the
//! run seed plus a short path such as `[epoch, task, Purpose::Support]`.
//! Streams never share state, so reordering work (or running it on several
//! threads) does not change what any consumer draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Geometry,
    Noise,
    Tasks,
    Support,
    Resample,
    Prompt,
    Eval,
    Split,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `seed` and a path of integer labels.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let key = path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

pub fn purpose_stream(seed: u64, purpose: Purpose, path: &[u64]) -> Rng {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(purpose as u64);
    full.extend_from_slice(path);
    stream(seed, &full)
}
