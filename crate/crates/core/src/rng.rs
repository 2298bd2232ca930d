//! Deterministic random streams.
//!
//! Every stochastic step draws from a `ChaCha8Rng` whose seed is derived
//! from the run seed plus a path of integer labels, so parallel or reordered
//! evaluation never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a label path into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

/// Stable labels for the named substreams used across the crate.
pub mod label {
    pub const ENV_REWARD: u64 = 1;
    pub const ENV_LENGTH: u64 = 2;
    pub const ENV_POLICY: u64 = 3;
    pub const ENV_PARTITION: u64 = 4;
    pub const ENV_PRETRAIN: u64 = 5;
    pub const ESTEP: u64 = 10;
    pub const WIN_RATE: u64 = 11;
    pub const PSEUDO: u64 = 12;
    pub const EPSILON: u64 = 13;
    pub const METRICS: u64 = 14;
    pub const TRANSFER: u64 = 15;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_give_distinct_reproducible_streams() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        let d: u64 = stream(8, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
