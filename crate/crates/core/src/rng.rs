//! Seeded random streams.
//!
//! Every stochastic routine takes an [`RngStream`]. The generator is ChaCha8,
//! whose output is specified bit-for-bit, so a seed reproduces the same draws
//! on every platform. Parallel work never shares a stream: each worker gets a
//! child derived from `(seed, index)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Independent stream for worker `index`; depends only on the parent seed,
    /// not on how many draws the parent has made.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(derive_seed(self.seed, index))
    }
}

/// SplitMix64 finalizer over the pair, used for seed splitting.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        let xs: Vec<u64> = (0..64).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn first_draw_is_pinned() {
        // Guards against a silent change of generator or seeding scheme.
        let mut a = RngStream::new(0);
        let first = a.next_u64();
        let mut b = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(first, b.next_u64());
    }

    #[test]
    fn children_are_distinct_and_stable() {
        let mut parent = RngStream::new(11);
        let c0 = parent.child(0).next_u64();
        let _ = parent.next_u64();
        assert_eq!(parent.child(0).next_u64(), c0);
        assert_ne!(parent.child(1).next_u64(), c0);
    }
}
