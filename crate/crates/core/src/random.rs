//! Seeded random stream shared by every sample statement in one execution
//! context.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Uniform draws take the top 53 bits of one `u64`: `u = (x >> 11) * 2^-53`,
//! giving `u ∈ [0, 1)`. Standard normals use the cosine branch of Box–Muller
//! on two consecutive uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`; the sine
//! branch is discarded so every normal costs exactly two `u64` draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Independent stream derived from this one, for parallel particles.
    pub fn split(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}
