//! Deterministic random streams.
//!
//! Every random decision in the toolkit (weight initialization, stratum
//! shuffles, epoch shuffles) draws from a named stream. A stream is a
//! ChaCha20 generator whose 32-byte key is
//! `SHA-256("halp-rng-v1" || seed as u64 LE || purpose as UTF-8)`.
//! Integers in a range are drawn by rejection sampling and floats from the
//! top 53 bits of a `u64`, so the sequences are identical on every platform
//! and do not depend on the sampling conventions of any `rand` release.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Version tag mixed into every stream key. Bump it if the derivation changes.
pub const RNG_VERSION: &str = "halp-rng-v1";

/// A named, seeded random stream.
#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64, purpose: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(RNG_VERSION.as_bytes());
        hasher.update(seed.to_le_bytes());
        hasher.update(purpose.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            inner: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`. `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        // Reject the top partial block so every residue is equally likely.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
