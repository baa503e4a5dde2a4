//! Reproducible random streams.
//!
//! Every stochastic component draws from [`SimRng`] (xoshiro256++). Seeds for
//! independent streams are derived by folding labelled parts through the
//! SplitMix64 finalizer, so a stream depends only on its labels and never on
//! scheduling order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SimRng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of a label, so string parts fold like integers.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Folds the parts in order into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_order_sensitive_and_stable() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[label_hash("RL"), 0]), derive_seed(&[label_hash("QL-0.9"), 0]));
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = rng_from_seed(7).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u64> = rng_from_seed(7).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
    }
}
