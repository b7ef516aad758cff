//! Synthetic denoising data: translating Gaussian blobs on a square grid.
//!
//! A clip renders [`FRAMES`] frames of a few blobs moving at constant
//! velocity on a `√N × √N` grid. Each grid cell becomes one token whose raw
//! features are its intensity in every frame plus four positional features
//! (`sin`/`cos` of its row and column). A fixed random embedding maps the raw
//! features to width `F`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

pub const FRAMES: usize = 4;
const BLOBS: usize = 2;
const RAW_FEATURES: usize = FRAMES + 4;
/// Seed of the fixed raw-feature embedding shared by every sample.
const EMBEDDING_SEED: u64 = 0x05EE_D0FE_4B3D;
/// `ᾱ` at the last step of the schedule.
pub const ALPHA_BAR_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub blocks: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub ffn_hidden: usize,
    /// Number of denoising steps; the timestep set is `1..=timesteps`.
    pub timesteps: usize,
}

impl ModelDims {
    /// B=4, N=64, F=32, H=2, D=M=8, four timesteps.
    pub fn fixture() -> Self {
        Self {
            blocks: 4,
            tokens: 64,
            width: 32,
            heads: 2,
            head_dim: 8,
            value_dim: 8,
            ffn_hidden: 64,
            timesteps: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("blocks", self.blocks),
            ("tokens", self.tokens),
            ("width", self.width),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("value_dim", self.value_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("timesteps", self.timesteps),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::Argument(format!("model dimension {name} must be positive")));
            }
        }
        grid_side(self.tokens)?;
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.timesteps)
    }

    /// The distillation timestep set `𝒯 = {1, …, T}`.
    pub fn timestep_set(&self) -> Vec<usize> {
        (1..=self.timesteps).collect()
    }
}

fn grid_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Argument(format!(
            "token count {tokens} is not a perfect square"
        )));
    }
    Ok(side)
}

/// `ᾱ_t = 1 − (t/T)(1 − ᾱ_end)` for `t ∈ 0..=T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "timestep {t} beyond schedule of {}", self.steps);
        1.0 - (t as f64 / self.steps as f64) * (1.0 - ALPHA_BAR_END)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub clean: Tensor,
    pub timestep: usize,
    pub noised: Tensor,
    pub noise: Tensor,
}

/// `x_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
pub fn noise_sample(clean: &Tensor, noise: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let a = schedule.alpha_bar(t);
    clean.zip_map(noise, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)
}

/// Inverts the noising identity for `t ≥ 1`.
pub fn recover_noise(noised: &Tensor, clean: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let a = schedule.alpha_bar(t);
    if a >= 1.0 {
        return Err(Error::Argument("noise is not identifiable at ᾱ = 1".into()));
    }
    noised.zip_map(clean, |xt, x0| (xt - a.sqrt() * x0) / (1.0 - a).sqrt())
}

fn embedding(width: usize) -> Tensor {
    let mut rng = SeededRng::new(EMBEDDING_SEED);
    rng.gaussian(&[RAW_FEATURES, width])
        .scale(1.0 / (RAW_FEATURES as f64).sqrt())
}

/// Renders one clean clip (`N × F`) from `rng`.
pub fn render_clip(rng: &mut SeededRng, dims: &ModelDims) -> Result<Tensor> {
    let side = grid_side(dims.tokens)?;
    let s = side as f64;
    let mut raw = Tensor::zeros(&[dims.tokens, RAW_FEATURES]);
    for _ in 0..BLOBS {
        let (cx, cy) = (rng.uniform() * s, rng.uniform() * s);
        let (vx, vy) = (2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0);
        let sigma = 0.6 + 0.25 * s * rng.uniform();
        let amplitude = 1.0 + rng.uniform();
        for frame in 0..FRAMES {
            let fx = cx + vx * frame as f64;
            let fy = cy + vy * frame as f64;
            for row in 0..side {
                for col in 0..side {
                    let d2 = (row as f64 - fy).powi(2) + (col as f64 - fx).powi(2);
                    let token = row * side + col;
                    let value = raw.get(token, frame) + amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    raw.set(token, frame, value);
                }
            }
        }
    }
    let omega = std::f64::consts::PI / s;
    for row in 0..side {
        for col in 0..side {
            let token = row * side + col;
            raw.set(token, FRAMES, (omega * row as f64).sin());
            raw.set(token, FRAMES + 1, (omega * row as f64).cos());
            raw.set(token, FRAMES + 2, (omega * col as f64).sin());
            raw.set(token, FRAMES + 3, (omega * col as f64).cos());
        }
    }
    raw.matmul(&embedding(dims.width))
}

/// One clean clip and its noise, determined entirely by `seed`.
pub fn seeded_clip(seed: u64, dims: &ModelDims) -> Result<(Tensor, Tensor)> {
    let mut rng = SeededRng::new(seed);
    let clean = render_clip(&mut rng, dims)?;
    let noise = rng.gaussian(&[dims.tokens, dims.width]);
    Ok((clean, noise))
}

/// `count` samples with timesteps drawn uniformly from `1..=T`.
pub fn generate_synthetic(rng: &mut SeededRng, count: usize, dims: &ModelDims) -> Result<Vec<SyntheticSample>> {
    dims.validate()?;
    let schedule = dims.schedule();
    (0..count)
        .map(|_| {
            let clean = render_clip(rng, dims)?;
            let noise = rng.gaussian(&[dims.tokens, dims.width]);
            let timestep = 1 + rng.below(dims.timesteps);
            let noised = noise_sample(&clean, &noise, timestep, &schedule)?;
            Ok(SyntheticSample {
                clean,
                timestep,
                noised,
                noise,
            })
        })
        .collect()
}
