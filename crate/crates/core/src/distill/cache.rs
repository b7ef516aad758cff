use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::toymodel::{noise_sample, seeded_clip, ToyModel};

/// Teacher activations for one (sample, timestep) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub seed: u64,
    pub timestep: usize,
    /// Input of every block.
    pub block_inputs: Vec<Tensor>,
    /// Attention kernel output of every block.
    pub attention_outputs: Vec<Tensor>,
}

/// Cached teacher activations, ordered seed-major then by timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCache {
    pub seeds: Vec<u64>,
    pub timesteps: Vec<usize>,
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn blocks(&self) -> usize {
        self.entries.first().map_or(0, |e| e.block_inputs.len())
    }
}

/// Runs the teacher on the forward-noised clip of every seed at every
/// timestep and records each block's input and attention output.
pub fn cache_teacher_trajectory(teacher: &ToyModel, seeds: &[u64], timesteps: &[usize]) -> Result<TrajectoryCache> {
    if !teacher.is_all_softmax() {
        return Err(Error::Argument("teacher blocks must all be softmax".into()));
    }
    if seeds.is_empty() || timesteps.is_empty() {
        return Err(Error::Argument("need at least one seed and one timestep".into()));
    }
    let schedule = teacher.dims.schedule();
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| timesteps.iter().map(move |&t| (s, t)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(seed, t)| {
            let (clean, noise) = seeded_clip(seed, &teacher.dims)?;
            let x = noise_sample(&clean, &noise, t, &schedule)?;
            let (_, cache) = teacher.forward_cached(&x, t)?;
            Ok(TrajectoryEntry {
                seed,
                timestep: t,
                block_inputs: cache.block_inputs().to_vec(),
                attention_outputs: cache.attention_outputs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryCache {
        seeds: seeds.to_vec(),
        timesteps: timesteps.to_vec(),
        entries,
    })
}
