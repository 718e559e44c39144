//! Seeded random stream shared by every stochastic step.
//!
//! The generator is SplitMix64 with its state initialised to the seed. All
//! derived quantities are defined on top of `next_u64` so another
//! implementation can reproduce them:
//!
//! * `next_f64`: top 53 bits scaled by 2^-53, in [0, 1).
//! * `below(n)`: `(next_u64 as u128 * n as u128) >> 64`.
//! * `shuffle`: Fisher-Yates from the last index down, swapping `i` with
//!   `below(i + 1)`.
//! * `gaussian`: Box-Muller cosine branch on `u1 = 1 - next_f64()`,
//!   `u2 = next_f64()`; one normal per two draws, nothing cached.
//! * `derive_seed(seed, i)`: first output of a SplitMix64 seeded with
//!   `seed ^ first_output(SplitMix64(i))`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

#[derive(Debug, Clone)]
pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }

    /// Independent stream for task `index` under a master `seed`.
    pub fn derived(seed: u64, index: u64) -> Self {
        Rng::new(derive_seed(seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index drawn from a discrete distribution given by `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let salt = SplitMix64::seed_from_u64(index).next_u64();
    SplitMix64::seed_from_u64(seed ^ salt).next_u64()
}
