//! Root-seed expansion.
//!
//! Every random stream is derived from one root seed: the stage name is
//! hashed with FNV-1a, xored into the root, and the result is passed
//! through SplitMix64 together with a per-stream counter. The derived value
//! seeds a `ChaCha8Rng`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for stream `counter` of stage `stage`.
pub fn derive_seed(root: u64, stage: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(stage)).wrapping_add(counter))
}

pub fn stage_rng(root: u64, stage: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage, counter))
}
