//! Deterministic per-purpose random streams.
//!
//! Every random draw in training and data generation comes from a stream
//! keyed by the global seed plus a tuple of tags (epoch, sample index,
//! purpose), so results never depend on call order across samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, for string tags such as domain names.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let key = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Purpose tags, kept distinct so streams never collide.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SPATIAL: u64 = 3;
    pub const STYLE: u64 = 4;
    pub const GEOMETRY: u64 = 5;
    pub const APPEARANCE: u64 = 6;
}
