use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::cache_teacher_trajectory;
use super::trainer::{block_activations, distill_block, DistillConfig, DistillOutcome, LossKind};
use crate::attention::FeatureMapPair;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::toymodel::ToyModel;

const TRAIN_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTableMeta {
    pub seed: u64,
    pub loss: LossKind,
    pub timesteps: Vec<usize>,
    pub train_seeds: Vec<u64>,
    pub heldout_seeds: Vec<u64>,
    /// Held-out error before training, same layout as the table.
    #[serde(with = "crate::numerics::serde_inf::matrix")]
    pub initial: Vec<Vec<f64>>,
}

/// Held-out distillation error per block and candidate rate.
///
/// A `+∞` entry marks a (block, rate) pair whose distillation diverged; it is
/// written as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTable {
    pub rates: Vec<usize>,
    pub blocks: usize,
    #[serde(with = "crate::numerics::serde_inf::matrix")]
    pub errors: Vec<Vec<f64>>,
    pub metadata: ErrorTableMeta,
}

impl ErrorTable {
    pub fn validate(&self) -> Result<()> {
        if self.errors.len() != self.blocks || self.errors.iter().any(|r| r.len() != self.rates.len()) {
            return Err(Error::Shape(format!(
                "error table is not {} × {}",
                self.blocks,
                self.rates.len()
            )));
        }
        if self.errors.iter().flatten().any(|e| e.is_nan() || *e < 0.0) {
            return Err(Error::Argument("error table entries must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn column(&self, rate: usize) -> Option<Vec<f64>> {
        let c = self.rates.iter().position(|&r| r == rate)?;
        Some(self.errors.iter().map(|row| row[c]).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        table.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(table)
    }
}

/// Result of distilling every (block, rate) pair.
#[derive(Clone, Debug)]
pub struct ErrorTableRun {
    pub table: ErrorTable,
    /// Trained φ for each (block, rate ≠ 1) that did not diverge.
    pub checkpoints: BTreeMap<(usize, usize), FeatureMapPair>,
    pub outcomes: BTreeMap<(usize, usize), DistillOutcome>,
}

fn stream(seed: u64, label: u64, count: usize) -> Vec<u64> {
    let mut rng = SeededRng::derived(seed, &[label]);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Distills every block at every candidate rate on up to `jobs` worker
/// threads. Divergent pairs become `+∞` entries.
pub fn build_error_table(teacher: &ToyModel, rates: &[usize], cfg: &DistillConfig, jobs: usize) -> Result<ErrorTableRun> {
    cfg.validate()?;
    if rates.is_empty() || rates.contains(&0) {
        return Err(Error::Argument("candidate rates must be positive".into()));
    }
    if cfg.timesteps.iter().any(|&t| t > teacher.dims.timesteps) {
        return Err(Error::Argument(format!(
            "timesteps {:?} exceed the model's {}",
            cfg.timesteps, teacher.dims.timesteps
        )));
    }
    let train_seeds = stream(cfg.seed, TRAIN_STREAM, cfg.train_samples);
    let heldout_seeds = stream(cfg.seed, HELDOUT_STREAM, cfg.heldout_samples);
    let train = cache_teacher_trajectory(teacher, &train_seeds, &cfg.timesteps)?;
    let heldout = cache_teacher_trajectory(teacher, &heldout_seeds, &cfg.timesteps)?;
    let blocks = teacher.dims.blocks;
    let acts = (0..blocks)
        .map(|b| block_activations(teacher, b, &train, &heldout))
        .collect::<Result<Vec<_>>>()?;
    let features = cfg.feature_config(teacher.dims.head_dim);
    features.validate()?;

    let pairs: Vec<(usize, usize)> = (0..blocks)
        .flat_map(|b| rates.iter().map(move |&r| (b, r)))
        .collect();
    let run = |&(b, r): &(usize, usize)| -> Result<Option<DistillOutcome>> {
        let mut init_rng = SeededRng::derived(cfg.seed, &[INIT_STREAM, b as u64, r as u64]);
        let init = FeatureMapPair::init(&mut init_rng, teacher.dims.heads, teacher.dims.head_dim, &features);
        let job = DistillConfig {
            seed: SeededRng::derived(cfg.seed, &[SHUFFLE_STREAM, b as u64, r as u64]).next_u64(),
            ..cfg.clone()
        };
        match distill_block(&acts[b], &init, r, &job) {
            Ok(out) => Ok(Some(out)),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
    let results = pool.install(|| pairs.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let mut errors = vec![vec![0.0; rates.len()]; blocks];
    let mut initial = vec![vec![0.0; rates.len()]; blocks];
    let mut checkpoints = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    for (&(b, r), result) in pairs.iter().zip(results) {
        let c = rates.iter().position(|&x| x == r).expect("rate from list");
        match result {
            Some(out) => {
                errors[b][c] = out.final_error;
                initial[b][c] = out.initial_error;
                if r != 1 {
                    checkpoints.insert((b, r), out.features.clone());
                }
                outcomes.insert((b, r), out);
            }
            None => {
                errors[b][c] = f64::INFINITY;
                initial[b][c] = f64::INFINITY;
            }
        }
    }
    Ok(ErrorTableRun {
        table: ErrorTable {
            rates: rates.to_vec(),
            blocks,
            errors,
            metadata: ErrorTableMeta {
                seed: cfg.seed,
                loss: cfg.loss,
                timesteps: cfg.timesteps.clone(),
                train_seeds,
                heldout_seeds,
                initial,
            },
        },
        checkpoints,
        outcomes,
    })
}
