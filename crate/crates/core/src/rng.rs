//! Deterministic derivation of independent random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha8 generator seeded
//! by hashing a master seed with a path of integers (update, prompt,
//! rollout, ...). Streams are therefore independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keeping the stream families apart.
pub mod domain {
    pub const TRAIN_INSTANCE: u64 = 1;
    pub const TRAIN_ROLLOUT: u64 = 2;
    pub const EVAL_INSTANCE: u64 = 3;
    pub const EVAL_ROLLOUT: u64 = 4;
    pub const WARMUP: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const INTERVENTION: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hashes a seed and a path of integers into a 64-bit stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for the stream addressed by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}
