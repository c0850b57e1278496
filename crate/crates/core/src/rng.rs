//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every consumer of randomness (scene generation, augmentation, weight init)
//! gets its own generator seeded from (global seed, stream name, index), so
//! results do not depend on how work is interleaved across samples or workers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, then mixed; only needs to separate the handful of stream names.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Derives a child seed from a global seed, a stream label and an index.
pub fn derive_seed(global: u64, stream: &str, index: u64) -> u64 {
    mix(global ^ hash_label(stream) ^ mix(index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// A generator for one (stream, index) pair under a global seed.
pub fn stream_rng(global: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_differ_across_streams_and_indices() {
        let a = derive_seed(7, "aug", 0);
        let b = derive_seed(7, "aug", 1);
        let c = derive_seed(7, "scene", 0);
        let d = derive_seed(8, "aug", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn stream_rng_is_reproducible() {
        let mut r1 = stream_rng(42, "scene", 3);
        let mut r2 = stream_rng(42, "scene", 3);
        let x1: [u64; 4] = std::array::from_fn(|_| r1.gen());
        let x2: [u64; 4] = std::array::from_fn(|_| r2.gen());
        assert_eq!(x1, x2);
    }
}
