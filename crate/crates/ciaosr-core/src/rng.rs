//! Seeded, splittable randomness.
//!
//! Every stochastic component draws from a [`SeedRng`]. The generator is
//! counter-based (ChaCha8), so independent streams can be split off a single
//! seed and the exact position can be saved into a checkpoint and restored.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

/// Serializable generator position, stored in checkpoints so a resumed or
/// replayed run continues the exact same random sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedRng {
    pub fn from_seed(seed: u64) -> Self {
        SeedRng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Split an independent stream off the same seed. Streams never overlap
    /// regardless of how much either generator is consumed.
    pub fn split(&self, stream: u64) -> Self {
        let mut rng = self.inner.clone();
        rng.set_stream(stream);
        rng.set_word_pos(0);
        SeedRng { inner: rng }
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "uniform bounds out of order");
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Sample `amount` distinct indices from `[0, length)`, order randomized.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, length, amount).into_vec()
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        SeedRng { inner: rng }
    }
}

/// Stable 64-bit FNV-1a hash of a name, used to key per-parameter and
/// per-case RNG streams.
pub fn hash_name(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
