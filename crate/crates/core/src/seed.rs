//! Stable seed derivation.
//!
//! Every stochastic stage draws from a `ChaCha8Rng` whose seed is derived from
//! a root seed and a label. The mixing function is splitmix64 over the label
//! bytes, so derived seeds are identical across platforms and toolchains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` and a stage label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = splitmix64(root);
    for chunk in label.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = splitmix64(h ^ u64::from_le_bytes(word));
    }
    splitmix64(h ^ label.len() as u64)
}

/// Derive a child seed from `root` and an integer index (epoch, resample, ...).
pub fn derive_index(root: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive_seed(7, "cohort"), derive_seed(7, "pretrain"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
        assert_eq!(derive_seed(7, "finetune"), derive_seed(7, "finetune"));
        // label length participates, so a trailing NUL is not a collision
        assert_ne!(derive_seed(1, "ab"), derive_seed(1, "ab\0"));
    }

    #[test]
    fn index_streams_differ() {
        let seeds: Vec<u64> = (0..100).map(|i| derive_index(3, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
    }
}
