//! Deterministic random number generation.
//!
//! All randomness in the workspace flows through this wrapper so that the
//! bit-level output stream depends only on the seed, never on library
//! float-conversion details: the u32 -> f32 mapping and the normal sampler
//! are written out explicitly.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Splitmix64-style mixer used to derive stream seeds from (seed, index)
/// pairs, e.g. one independent stream per training step or per episode.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream.
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f32>,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Derived stream for sub-task `index` under `seed`.
    pub fn derive(seed: u64, index: u64) -> Self {
        Self::seed_from_u64(mix_seed(seed, index))
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 24 bits of precision.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, bound) by rejection sampling.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let bound64 = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound64) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; caches the second sample of each pair.
    pub fn normal(&mut self) -> f32 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] so ln never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (u1 as f64).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2 as f64;
        self.spare_normal = Some((r * theta.sin()) as f32);
        (r * theta.cos()) as f32
    }
}
