//! Seeded random number generation.
//!
//! One fixed algorithm (ChaCha8 via `rand_chacha`) everywhere, so a seed fully
//! determines every stream the engine consumes: weight draws, batch shuffles,
//! augmentation offsets, synthetic data. Shuffling is an explicit Fisher-Yates
//! so the sequence of draws is pinned by this crate rather than by a library
//! version.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift rejection-free mapping; bias is negligible for the
        // small n used here and keeps the draw count fixed at one per call.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform float in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + u * (hi - lo)
    }

    pub fn flip(&mut self, p: f64) -> bool {
        self.uniform(0.0, 1.0) < p
    }

    /// Signed integer offset in `[-max, max]`.
    pub fn offset(&mut self, max: usize) -> isize {
        self.below(2 * max + 1) as isize - max as isize
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn fill_normal<T: Element>(&mut self, data: &mut [T], mean: f64, std: f64) {
        for v in data {
            *v = T::from_f64(self.normal(mean, std));
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
