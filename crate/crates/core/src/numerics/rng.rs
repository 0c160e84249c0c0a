//! Portable deterministic random numbers.
//!
//! The generator is xoshiro256** (Blackman & Vigna) with its 256-bit state
//! filled from SplitMix64 applied to the 64-bit seed. Both algorithms are
//! fully specified by their published constants, so the same seed yields
//! the same stream on every platform and in any language:
//!
//! ```text
//! splitmix64:  s += 0x9E3779B97F4A7C15
//!              z = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9
//!              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!              out = z ^ (z >> 31)
//! xoshiro256**: out = rotl(s1 * 5, 7) * 9, then the standard 17/45 update
//! ```
//!
//! Normal draws use the Box–Muller transform on 53-bit uniforms.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::Tensor;
use crate::Result;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent generator for a sub-stream (sample index, worker id).
    ///
    /// The stream id is mixed through one SplitMix64 round before being
    /// combined with the seed, so `(seed, stream)` pairs never alias the way
    /// a plain `seed + stream` would.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed ^ splitmix64(stream.wrapping_add(SPLITMIX_GAMMA)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` by 128-bit multiply-high.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box–Muller, second value of each pair cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut s: u64) -> u64 {
    s = s.wrapping_add(SPLITMIX_GAMMA);
    let mut z = s;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tensor of i.i.d. standard normal values.
pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gaussian())
}
