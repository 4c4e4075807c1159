//! Deterministic random streams.
//!
//! Every random draw in the crate flows through a [`StreamRng`] derived from a
//! run seed and a small tuple of stream coordinates (replicate, stream tag,
//! level, ...). Two different coordinate tuples give statistically independent
//! ChaCha streams, so results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used by the estimators.
pub mod tag {
    pub const LEVEL_DRAW: u64 = 1;
    pub const MAIN: u64 = 2;
    pub const TILDE: u64 = 3;
    pub const SCORE: u64 = 4;
    pub const SIMULATE: u64 = 5;
    pub const ITERATION: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with stream coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

/// Builds an independent stream for `(seed, coords...)`.
pub fn stream(seed: u64, coords: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, coords);
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&h.to_le_bytes());
        h = splitmix64(h);
    }
    ChaCha8Rng::from_seed(key)
}
