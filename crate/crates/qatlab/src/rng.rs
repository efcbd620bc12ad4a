//! Seeded pseudo-random generator with named sub-streams.
//!
//! Backed by ChaCha8, which produces an identical stream for an identical
//! seed on every platform. All randomness in a run flows from one config
//! seed through named sub-streams (data, init, noise, timesteps), so two
//! runs that differ only on one axis share everything else.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream for a named purpose.
    pub fn substream(&self, name: &str) -> Rng {
        Rng::new(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Modulo bias is negligible for desk-scale n against a 64-bit stream.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; self-contained for cross-platform
    /// bitwise reproducibility.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec<S: Scalar>(&mut self, n: usize) -> Vec<S> {
        (0..n).map(|_| S::c(self.normal())).collect()
    }

    pub fn uniform_vec<S: Scalar>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<S> {
        (0..n).map(|_| S::c(lo + (hi - lo) * self.uniform())).collect()
    }
}
