//! Platform-independent seeded randomness.
//!
//! The generator is SplitMix64. With a 64-bit state `s`, each draw is
//!
//! ```text
//! s  = s + 0x9E3779B97F4A7C15            (wrapping)
//! z  = s
//! z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (wrapping)
//! z  = (z ^ (z >> 27)) * 0x94D049BB133111EB   (wrapping)
//! out = z ^ (z >> 31)
//! ```
//!
//! Uniforms in `[0, 1)` take the top 53 bits: `(out >> 11) · 2⁻⁵³`.
//! Normals use Box–Muller on two consecutive draws `a`, `b`:
//! `u₁ = ((a >> 11) + 1) · 2⁻⁵³` (never zero), `u₂ = (b >> 11) · 2⁻⁵³`,
//! `z₀ = √(−2 ln u₁) cos(2π u₂)`, `z₁ = √(−2 ln u₁) sin(2π u₂)`; `z₀` is
//! returned first and `z₁` is kept for the next call.

use super::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream derived from `seed` and a list of labels (block index, rate, ...).
    pub fn derived(seed: u64, labels: &[u64]) -> Self {
        let mut mixer = SeededRng::new(seed);
        let mut s = mixer.next_u64();
        for &label in labels {
            let mut m = SeededRng::new(s ^ label.wrapping_mul(GOLDEN_GAMMA));
            s = m.next_u64();
        }
        SeededRng::new(s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer in `0..n` by multiply-shift (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Tensor of i.i.d. standard normals, filled in row-major order.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.gaussian(shape)
}
