//! Counter-based random streams.
//!
//! Every random draw in the library comes from a ChaCha stream keyed by the
//! user seed and a tuple of counters (purpose, iteration, component, ...),
//! so results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from a seed and a counter tuple.
pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream purposes.
pub mod purpose {
    pub const MC_SAMPLES: u64 = 1;
    pub const INIT: u64 = 2;
    pub const KMEANS: u64 = 3;
    pub const GMM: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const RESEED: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
