//! Deterministic splitting of one run seed into independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream addressed by `path` under `seed`, e.g.
/// `(seed, [TRAIN, epoch, step, sample])`.
pub fn stream_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| {
            splitmix64(acc.rotate_left(23).wrapping_add(splitmix64(p)))
        })
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, path))
}

/// Stream tags, kept distinct so streams never collide across purposes.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const GUMBEL: u64 = 3;
    pub const DATA: u64 = 4;
    pub const RANDOM_POLICY: u64 = 5;
    pub const SPLIT: u64 = 6;
}
