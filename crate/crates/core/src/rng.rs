//! Seeded random streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is derived
//! from a base seed and a list of stream identifiers, so that independent
//! workers (folds, trials, datasets) never share a stream and results do not
//! depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and stream identifiers.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(splitmix64(seed), |acc, &s| {
        splitmix64(acc ^ splitmix64(s.wrapping_add(0xA5A5)))
    })
}

pub fn stream(seed: u64, streams: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, streams))
}
