//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a path of stream labels, so replications can be
//! scheduled in any order without changing their draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used by the engine and the conformal baseline. Sharing
/// them is what makes a static-policy run line up with split conformal
/// selection on the same seed.
pub const STREAM_SHUFFLE: u64 = 0x5348_5546;
pub const STREAM_RESERVE: u64 = 0x5245_5345;
pub const STREAM_HANDLES: u64 = 0x4841_4e44;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`. Distinct paths give statistically independent
/// seeds; the empty path returns a scrambled copy of `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &p in path {
        acc = splitmix64(acc ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    acc
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
