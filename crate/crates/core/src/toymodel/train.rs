//! Teacher training and end-to-end finetuning on the denoising objective.

use serde::{Deserialize, Serialize};

use super::data::{generate_synthetic, ModelDims, SyntheticSample};
use super::model::ToyModel;
use crate::distill::{adamw_step, AdamState, AdamW};
use crate::error::{Error, Result};
use crate::numerics::{Parameters, SeededRng, Tensor};

/// Loss above which a training run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Finetuning defaults: η = 1e-5, 200 iterations, batch 16.
    pub fn finetune_default(seed: u64) -> Self {
        Self {
            iters: 200,
            lr: 1e-5,
            batch: 16,
            seed,
        }
    }

    /// Teacher defaults: η = 1e-3, 500 iterations, batch 8.
    pub fn teacher_default(seed: u64) -> Self {
        Self {
            iters: 500,
            lr: 1e-3,
            batch: 8,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mini-batch loss at every iteration.
    pub losses: Vec<f64>,
}

/// Mean squared noise-prediction error over `samples`.
pub fn denoising_loss(model: &ToyModel, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.forward(&s.noised, s.timestep)?;
        total += mse(&pred, &s.noise)?;
    }
    Ok(total / samples.len() as f64)
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let diff = pred.sub(target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

fn loss_and_grad(model: &ToyModel, batch: &[&SyntheticSample]) -> Result<(f64, ToyModel)> {
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let (pred, cache) = model.forward_cached(&s.noised, s.timestep)?;
        let diff = pred.sub(&s.noise)?;
        let n = diff.len() as f64;
        total += diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        let dout = diff.scale(2.0 * scale / n);
        model.backward(&cache, &dout, &mut grads)?;
    }
    Ok((total * scale, grads))
}

fn train_denoiser(model: &ToyModel, data: &[SyntheticSample], cfg: &TrainConfig, context: &str) -> Result<TrainOutcome> {
    if cfg.iters > 0 && (data.is_empty() || cfg.batch == 0 || !(cfg.lr > 0.0)) {
        return Err(Error::Argument(format!(
            "{context}: need data, batch ≥ 1 and lr > 0"
        )));
    }
    let mut model = model.clone();
    let opt = AdamW::new(cfg.lr);
    let mut theta = model.flatten();
    let mut state = AdamState::new(theta.len());
    let mut rng = SeededRng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iters);
    for update in 0..cfg.iters {
        let batch: Vec<&SyntheticSample> = (0..cfg.batch).map(|_| &data[rng.below(data.len())]).collect();
        let (loss, grads) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                context: context.to_string(),
                loss,
                update,
            });
        }
        losses.push(loss);
        adamw_step(&mut theta, &grads.flatten(), &mut state, &opt).map_err(|_| Error::Divergence {
            context: context.to_string(),
            loss,
            update,
        })?;
        model.assign_flat(&theta);
    }
    Ok(TrainOutcome { model, losses })
}

/// Copies of `samples` whose noise target is replaced by the teacher's
/// prediction, so finetuning pulls the student toward the teacher.
pub fn teacher_labelled(teacher: &ToyModel, samples: &[SyntheticSample]) -> Result<Vec<SyntheticSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(SyntheticSample {
                noise: teacher.forward(&s.noised, s.timestep)?,
                ..s.clone()
            })
        })
        .collect()
}

/// Trains an all-softmax model on noise prediction and returns it frozen.
pub fn train_teacher(model: &ToyModel, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !model.is_all_softmax() {
        return Err(Error::Argument("teacher blocks must all be softmax".into()));
    }
    train_denoiser(model, data, cfg, "teacher training")
}

/// Samples used to train the fixture teacher.
pub const TEACHER_SAMPLES: usize = 64;

/// Fixture-scale teacher trained from a random init on synthetic clips.
pub fn trained_fixture_teacher(seed: u64) -> Result<ToyModel> {
    let dims = ModelDims::fixture();
    let init = ToyModel::frozen_random(dims, seed, 1.0)?;
    let data = generate_synthetic(&mut SeededRng::derived(seed, &[1]), TEACHER_SAMPLES, &dims)?;
    Ok(train_teacher(&init, &data, &TrainConfig::teacher_default(seed))?.model)
}

/// End-to-end finetuning of every student parameter, feature maps included.
pub fn finetune_student(student: &ToyModel, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_denoiser(student, data, cfg, "finetuning")
}
