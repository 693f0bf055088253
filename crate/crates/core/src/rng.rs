//! Reproducible random streams.
//!
//! A single root seed keys a ChaCha8 block function; independent streams are
//! selected through ChaCha's 64-bit stream counter, so a stream is a pure
//! function of `(root, label, index)` and can be created on any thread in any
//! order without coordination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RootSeed(pub u64);

impl RootSeed {
    pub fn new(seed: u64) -> Self {
        RootSeed(seed)
    }

    /// Independent stream `index` of the family `label`.
    pub fn stream(&self, label: &str, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream_id(label, index));
        rng
    }

    /// Child root for a nested computation (a replication, a grid node).
    pub fn derive(&self, label: &str, index: u64) -> RootSeed {
        let mut rng = self.stream(label, index);
        RootSeed(splitmix64(rng.random::<u64>()))
    }
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_id(label: &str, index: u64) -> u64 {
    splitmix64(fnv1a(label) ^ splitmix64(index))
}

/// Fills `out` with independent N(0, scale^2) draws.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, scale: f64, out: &mut [f64]) {
    for o in out.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *o = scale * n;
    }
}
