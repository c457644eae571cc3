//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is keyed by the master seed plus a
//! tuple of identifiers (client, round, purpose ...). Streams never depend on
//! scheduling, so serial and parallel execution produce identical bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes.
pub mod purpose {
    pub const INIT: u64 = 0x494e_4954;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const SILO: u64 = 0x5349_4c4f;
    pub const RESAMPLE: u64 = 0x5245_5341;
    pub const USER: u64 = 0x5553_4552;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const RUN: u64 = 0x5255_4e53;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `master`. Order-sensitive.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(p))
    })
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, parts: &[u64]) -> Rng {
    rng_from(derive(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matters() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[1]));
        assert_eq!(derive(9, &[4, 5]), derive(9, &[4, 5]));
    }
}
