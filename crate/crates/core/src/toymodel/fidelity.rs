use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{noise_sample, seeded_clip};
use super::model::ToyModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFidelity {
    pub seed: u64,
    /// Mean per-token L1 between student and teacher outputs, averaged over timesteps.
    pub output_l1: f64,
    /// Same metric on each block's attention output, with both models fed
    /// the teacher's block input.
    pub block_l1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_seed: Vec<SeedFidelity>,
    pub mean_output_l1: f64,
    pub median_output_l1: f64,
    pub mean_block_l1: Vec<f64>,
}

/// `Σ|a − b| / rows`.
fn per_token_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.data().iter().map(|x| x.abs()).sum::<f64>() / a.rows() as f64)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn seed_fidelity(student: &ToyModel, teacher: &ToyModel, seed: u64) -> Result<SeedFidelity> {
    let dims = &teacher.dims;
    let schedule = dims.schedule();
    let (clean, noise) = seeded_clip(seed, dims)?;
    let steps = dims.timestep_set();
    let mut output_l1 = 0.0;
    let mut block_l1 = vec![0.0; dims.blocks];
    for &t in &steps {
        let x = noise_sample(&clean, &noise, t, &schedule)?;
        let (teacher_out, cache) = teacher.forward_cached(&x, t)?;
        output_l1 += per_token_l1(&student.forward(&x, t)?, &teacher_out)?;
        let targets = cache.attention_outputs();
        for (l, acc) in block_l1.iter_mut().enumerate() {
            let y = student.block_attention(l, &cache.block_inputs()[l])?;
            *acc += per_token_l1(&y, &targets[l])?;
        }
    }
    let k = steps.len() as f64;
    Ok(SeedFidelity {
        seed,
        output_l1: output_l1 / k,
        block_l1: block_l1.into_iter().map(|v| v / k).collect(),
    })
}

/// Student-vs-teacher distance on the forward-noised clips of `seeds` at
/// every timestep `1..=T`.
pub fn evaluate_fidelity(student: &ToyModel, teacher: &ToyModel, seeds: &[u64]) -> Result<FidelityReport> {
    if student.dims != teacher.dims {
        return Err(Error::Shape("student and teacher dimensions differ".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Argument("no evaluation seeds".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&s| seed_fidelity(student, teacher, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    let outputs: Vec<f64> = per_seed.iter().map(|s| s.output_l1).collect();
    let mean_block_l1 = (0..teacher.dims.blocks)
        .map(|l| per_seed.iter().map(|s| s.block_l1[l]).sum::<f64>() / n)
        .collect();
    Ok(FidelityReport {
        mean_output_l1: outputs.iter().sum::<f64>() / n,
        median_output_l1: median(&outputs),
        mean_block_l1,
        per_seed,
    })
}
