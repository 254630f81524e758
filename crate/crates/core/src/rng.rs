//! Seeded, stream-separated randomness.
//!
//! A `(seed, stream)` pair selects an independent ChaCha8 keystream, so
//! separate concerns (parameter init, data, resets, exploration) never
//! perturb each other's draws.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const RESET: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const ENV: u64 = 6;
    pub const POLICY: u64 = 7;
    pub const REPLAY: u64 = 8;
    pub const COHORT: u64 = 9;
}

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> RngState {
        RngState::new(self.seed, stream)
    }

    /// Derives a child stream id from this stream and a salt.
    pub fn derive(&self, salt: u64) -> RngState {
        RngState::new(
            self.seed,
            self.stream.wrapping_mul(1_000_003).wrapping_add(salt),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
