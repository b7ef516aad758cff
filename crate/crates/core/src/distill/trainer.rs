//! Isolated-block distillation of the feature maps.
//!
//! Each round shuffles the training activations, walks them in mini-batches
//! of `m`, and applies `U` AdamW updates per mini-batch. Only φ is trained;
//! the block's projections come from the frozen teacher. After every round
//! the held-out value-distillation error is measured; training stops once
//! it improves by less than `tolerance` (relative) over a round, after
//! `max_rounds`, or when the update cap is reached.

use serde::{Deserialize, Serialize};

use super::cache::TrajectoryCache;
use super::loss::{attention_distill_loss, loss_value_distill, value_distill_grad};
use super::optim::{adamw_step, AdamState, AdamW};
use crate::attention::{
    attention_backward, attention_forward, partition_tokens, project_qkv, FeatureMapConfig, FeatureMapPair,
    HybridMode, Kernel, Qkv, TokenPartition,
};
use crate::error::{Error, Result};
use crate::numerics::{Parameters, SeededRng, Tensor};
use crate::toymodel::{ToyModel, DIVERGENCE_LIMIT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Value,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Mini-batch size `m`.
    pub batch: usize,
    /// Update repeats `U` per mini-batch.
    pub repeats: usize,
    pub lr: f64,
    pub timesteps: Vec<usize>,
    pub loss: LossKind,
    pub max_rounds: usize,
    /// Relative held-out improvement per round below which training stops.
    /// `-inf` disables early stopping.
    pub tolerance: f64,
    /// Hard cap on optimizer updates.
    pub max_updates: Option<usize>,
    pub seed: u64,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub mode: HybridMode,
    /// Feature-map shape; `None` uses the default for the head width.
    pub features: Option<FeatureMapConfig>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            repeats: 1,
            lr: 1e-3,
            timesteps: vec![1, 2, 3, 4],
            loss: LossKind::Value,
            max_rounds: 50,
            tolerance: 1e-4,
            max_updates: None,
            seed: 0,
            train_samples: 8,
            heldout_samples: 4,
            mode: HybridMode::Literal,
            features: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(format!("distill config: {msg}")));
        if self.batch == 0 {
            return bad("batch must be ≥ 1");
        }
        if self.repeats == 0 {
            return bad("repeats must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.timesteps.is_empty() {
            return bad("timestep set is empty");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be ≥ 1");
        }
        if self.tolerance.is_nan() {
            return bad("tolerance must be a number");
        }
        if self.train_samples == 0 || self.heldout_samples == 0 {
            return bad("need training and held-out samples");
        }
        if let Some(f) = &self.features {
            f.validate()?;
        }
        Ok(())
    }

    pub fn feature_config(&self, head_dim: usize) -> FeatureMapConfig {
        self.features.unwrap_or_else(|| FeatureMapConfig::for_head_dim(head_dim))
    }
}

/// Teacher projections and attention output for one cached entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub qkv: Qkv,
    pub target: Tensor,
}

/// Training and held-out activations of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActivations {
    pub train: Vec<Activation>,
    pub heldout: Vec<Activation>,
}

impl BlockActivations {
    pub fn heads(&self) -> usize {
        self.train[0].qkv.heads()
    }

    pub fn head_dim(&self) -> usize {
        self.train[0].qkv.head_dim()
    }

    pub fn tokens(&self) -> usize {
        self.train[0].qkv.tokens()
    }
}

fn activations(teacher: &ToyModel, block: usize, cache: &TrajectoryCache) -> Result<Vec<Activation>> {
    let params = teacher
        .blocks
        .get(block)
        .ok_or_else(|| Error::Argument(format!("block {block} out of range")))?;
    cache
        .entries
        .iter()
        .map(|e| {
            Ok(Activation {
                qkv: project_qkv(&e.block_inputs[block], &params.attention)?,
                target: e.attention_outputs[block].clone(),
            })
        })
        .collect()
}

pub fn block_activations(
    teacher: &ToyModel,
    block: usize,
    train: &TrajectoryCache,
    heldout: &TrajectoryCache,
) -> Result<BlockActivations> {
    let train = activations(teacher, block, train)?;
    let heldout = activations(teacher, block, heldout)?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Argument("empty activation set".into()));
    }
    Ok(BlockActivations { train, heldout })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    /// Feature maps with the lowest held-out error seen.
    pub features: FeatureMapPair,
    pub initial_error: f64,
    pub final_error: f64,
    /// Mini-batch training loss at every update.
    pub train_losses: Vec<f64>,
    /// Held-out error after every round.
    pub heldout_errors: Vec<f64>,
    pub updates: usize,
}

/// Mean held-out value-distillation error of a hybrid kernel.
pub fn heldout_error(
    acts: &[Activation],
    features: &FeatureMapPair,
    partition: &TokenPartition,
    mode: HybridMode,
) -> Result<f64> {
    let mut total = 0.0;
    for a in acts {
        let (y, _) = attention_forward(Kernel::Hybrid(features, partition, mode), &a.qkv)?;
        total += loss_value_distill(&a.target, &y)?;
    }
    Ok(total / acts.len() as f64)
}

fn batch_loss_and_grad(
    batch: &[&Activation],
    features: &FeatureMapPair,
    partition: &TokenPartition,
    cfg: &DistillConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = features.zeros_like();
    let mut total = 0.0;
    for a in batch {
        match cfg.loss {
            LossKind::Value => {
                let kernel = Kernel::Hybrid(features, partition, cfg.mode);
                let (y, cache) = attention_forward(kernel, &a.qkv)?;
                total += loss_value_distill(&a.target, &y)?;
                let dy = value_distill_grad(&a.target, &y)?;
                attention_backward(kernel, &a.qkv, &cache, &dy, Some(&mut grads))?;
            }
            LossKind::Attention => {
                total += attention_distill_loss(&a.qkv, features, Some(&mut grads))?;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let flat = grads.flatten().into_iter().map(|g| g * scale).collect();
    Ok((total * scale, flat))
}

/// Distills `init` toward the teacher's attention at hybrid rate `rate`.
///
/// Rate 1 has no linear tokens: the kernel already equals the teacher, so
/// both errors are 0 and no update is made.
pub fn distill_block(
    acts: &BlockActivations,
    init: &FeatureMapPair,
    rate: usize,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if init.heads() != acts.heads() || init.input_dim() != acts.head_dim() {
        return Err(Error::Shape("feature maps do not match the block's heads".into()));
    }
    let partition = partition_tokens(acts.tokens(), rate)?;
    if partition.linear_indices().is_empty() {
        return Ok(DistillOutcome {
            features: init.clone(),
            initial_error: 0.0,
            final_error: 0.0,
            train_losses: Vec::new(),
            heldout_errors: Vec::new(),
            updates: 0,
        });
    }
    let context = format!("distillation at rate {rate}");
    let initial_error = heldout_error(&acts.heldout, init, &partition, cfg.mode)?;
    let opt = AdamW::new(cfg.lr);
    let mut features = init.clone();
    let mut theta = features.flatten();
    let mut state = AdamState::new(theta.len());
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..acts.train.len()).collect();
    let cap = cfg.max_updates.unwrap_or(usize::MAX);

    let mut best = (initial_error, features.clone());
    let mut previous = initial_error;
    let mut train_losses = Vec::new();
    let mut heldout_errors = Vec::new();
    let mut updates = 0;
    'rounds: for _ in 0..cfg.max_rounds {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Activation> = chunk.iter().map(|&i| &acts.train[i]).collect();
            for _ in 0..cfg.repeats {
                if updates >= cap {
                    break;
                }
                let (loss, grad) = batch_loss_and_grad(&batch, &features, &partition, cfg)?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT || adamw_step(&mut theta, &grad, &mut state, &opt).is_err() {
                    return Err(Error::Divergence {
                        context,
                        loss,
                        update: updates,
                    });
                }
                features.assign_flat(&theta);
                train_losses.push(loss);
                updates += 1;
            }
        }
        let err = heldout_error(&acts.heldout, &features, &partition, cfg.mode)?;
        if !err.is_finite() || err > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                context,
                loss: err,
                update: updates,
            });
        }
        heldout_errors.push(err);
        if err < best.0 {
            best = (err, features.clone());
        }
        let improvement = if previous > 0.0 { (previous - err) / previous } else { 0.0 };
        previous = err;
        if improvement < cfg.tolerance || updates >= cap {
            break 'rounds;
        }
    }
    Ok(DistillOutcome {
        features: best.1,
        initial_error,
        final_error: best.0,
        train_losses,
        heldout_errors,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{softmax_attention, AttentionWeights};
    use crate::distill::cache_teacher_trajectory;
    use crate::toymodel::ModelDims;

    fn setup(tokens: usize, head_dim: usize) -> (ToyModel, BlockActivations) {
        let dims = ModelDims {
            blocks: 1,
            tokens,
            width: 8,
            heads: 2,
            head_dim,
            value_dim: 4,
            ffn_hidden: 16,
            timesteps: 4,
        };
        let teacher = ToyModel::frozen_random(dims, 0, 1.0).unwrap();
        let train = cache_teacher_trajectory(&teacher, &[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap();
        let heldout = cache_teacher_trajectory(&teacher, &[100, 101], &[1, 2, 3, 4]).unwrap();
        let acts = block_activations(&teacher, 0, &train, &heldout).unwrap();
        (teacher, acts)
    }

    /// Random token sequences through one frozen random softmax layer.
    fn random_layer(tokens: usize, head_dim: usize, seed: u64) -> (AttentionWeights, BlockActivations) {
        let mut rng = SeededRng::new(seed);
        let w = AttentionWeights::random(&mut rng, 8, 2, head_dim, 4, 1.0);
        let mut sample = |count: usize| -> Vec<Activation> {
            (0..count)
                .map(|_| {
                    let qkv = project_qkv(&rng.gaussian(&[tokens, 8]), &w).unwrap();
                    let target = softmax_attention(&qkv).unwrap();
                    Activation { qkv, target }
                })
                .collect()
        };
        let train = sample(16);
        let heldout = sample(4);
        (w, BlockActivations { train, heldout })
    }

    fn init(acts: &BlockActivations, seed: u64) -> FeatureMapPair {
        let cfg = FeatureMapConfig::for_head_dim(acts.head_dim());
        FeatureMapPair::init(&mut SeededRng::new(seed), acts.heads(), acts.head_dim(), &cfg)
    }

    #[test]
    fn rate_one_has_zero_error_without_training() {
        let (_, acts) = setup(16, 4);
        let phi = init(&acts, 0);
        let out = distill_block(&acts, &phi, 1, &DistillConfig::default()).unwrap();
        assert_eq!((out.initial_error, out.final_error, out.updates), (0.0, 0.0, 0));
        assert_eq!(out.features, phi);
    }

    #[test]
    fn training_reduces_heldout_error_deterministically() {
        let (teacher, acts) = random_layer(32, 4, 0);
        let before = teacher.clone();
        let phi = init(&acts, 0);
        let cfg = DistillConfig {
            max_updates: Some(200),
            tolerance: 0.0,
            ..DistillConfig::default()
        };
        let a = distill_block(&acts, &phi, 2, &cfg).unwrap();
        let b = distill_block(&acts, &phi, 2, &cfg).unwrap();
        assert!(a.final_error < a.initial_error, "{} !< {}", a.final_error, a.initial_error);
        assert_eq!(a.updates, 200);
        assert_eq!(a.train_losses, b.train_losses);
        assert_eq!(a.features, b.features);
        assert_eq!(teacher, before);
    }

    #[test]
    fn attention_loss_variant_trains() {
        let (_, acts) = setup(16, 4);
        let phi = init(&acts, 1);
        let cfg = DistillConfig {
            loss: LossKind::Attention,
            max_updates: Some(60),
            tolerance: 0.0,
            ..DistillConfig::default()
        };
        let out = distill_block(&acts, &phi, 4, &cfg).unwrap();
        assert!(out.final_error <= out.initial_error);
        let first = out.train_losses[..5].iter().sum::<f64>();
        let last = out.train_losses[out.train_losses.len() - 5..].iter().sum::<f64>();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn divergence_is_reported() {
        let (_, acts) = setup(16, 4);
        let phi = init(&acts, 2);
        let cfg = DistillConfig {
            lr: 1e200,
            loss: LossKind::Attention,
            tolerance: 0.0,
            max_rounds: 20,
            ..DistillConfig::default()
        };
        assert!(matches!(
            distill_block(&acts, &phi, 2, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for cfg in [
            DistillConfig { batch: 0, ..Default::default() },
            DistillConfig { repeats: 0, ..Default::default() },
            DistillConfig { lr: 0.0, ..Default::default() },
            DistillConfig { timesteps: vec![], ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
