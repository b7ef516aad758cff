//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use attn_surgery::attention::FeatureMapConfig;
use attn_surgery::distill::DistillConfig;
use attn_surgery::planner::AttentionDims;
use attn_surgery::toymodel::{ModelDims, TrainConfig, FIXTURE_QK_GAIN};
use serde::Deserialize;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Output directory for every stage artifact.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_rates")]
    pub rates: Vec<usize>,
    #[serde(default = "ModelDims::fixture")]
    pub model: ModelDims,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub flops: FlopsConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_rates() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSource {
    /// Train from a random init on synthetic clips.
    #[default]
    Trained,
    /// Random frozen weights.
    FrozenRandom,
    /// Load a saved model.
    File,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub source: TeacherSource,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub qk_gain: f64,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub samples: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let t = TrainConfig::teacher_default(0);
        Self {
            source: TeacherSource::Trained,
            seed: 0,
            path: None,
            qk_gain: FIXTURE_QK_GAIN,
            iters: t.iters,
            lr: t.lr,
            batch: t.batch,
            samples: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    #[default]
    Mckp,
    Homogeneous,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub mode: PlanMode,
    /// Absolute FLOPs budget β.
    pub budget: Option<f64>,
    /// β as a fraction of the all-softmax cost; used when `budget` is unset.
    pub budget_fraction: Option<f64>,
    /// FLOPs per DP unit; defaults to β/10⁶.
    pub granularity: Option<f64>,
    /// Sequence length used for the cost table; defaults to the model's.
    pub cost_tokens: Option<usize>,
    /// Homogeneous mode: number of blocks to convert.
    pub k: Option<usize>,
    /// Homogeneous mode: the single rate used.
    pub rate: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mode: PlanMode::Mckp,
            budget: None,
            budget_fraction: Some(0.75),
            granularity: None,
            cost_tokens: None,
            k: None,
            rate: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub samples: usize,
    /// Relabel the finetuning set with the teacher's predictions.
    pub teacher_labels: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let t = TrainConfig::finetune_default(0);
        Self {
            iters: t.iters,
            lr: t.lr,
            batch: t.batch,
            seed: 0,
            samples: 64,
            teacher_labels: true,
        }
    }
}

impl FinetuneConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iters: self.iters,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    /// Teacher with the plan's blocks swapped in, no finetuning.
    #[default]
    Assembled,
    /// The student written by `finetune`.
    Finetuned,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub model: EvalModel,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (9001..=9008).collect(),
            model: EvalModel::Assembled,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub blocks: usize,
    pub features: Option<FeatureMapConfig>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            tokens: 32768,
            heads: 12,
            head_dim: 128,
            value_dim: 128,
            blocks: 30,
            features: None,
        }
    }
}

impl FlopsConfig {
    pub fn dims(&self) -> AttentionDims {
        let f = self.features.unwrap_or_else(|| FeatureMapConfig::for_head_dim(self.head_dim));
        AttentionDims::new(self.tokens, self.heads, self.head_dim, self.value_dim, &f)
    }
}

impl PipelineConfig {
    /// Defaults for every section, used when no file is given.
    pub fn defaults() -> Self {
        toml::from_str(&format!("version = {CONFIG_VERSION}")).expect("default config parses")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.rates.is_empty() || self.rates.contains(&0) || !self.rates.contains(&1) {
            return bad(format!("rates {:?} must be positive and include 1", self.rates));
        }
        let mut sorted = self.rates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.rates.len() {
            return bad(format!("rates {:?} contain duplicates", self.rates));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.distill.timesteps.iter().any(|&t| t == 0 || t > self.model.timesteps) {
            return bad(format!(
                "distill.timesteps {:?} must lie in 1..={}",
                self.distill.timesteps, self.model.timesteps
            ));
        }
        if self.teacher.source == TeacherSource::File && self.teacher.path.is_none() {
            return bad("teacher.source = \"file\" needs teacher.path".into());
        }
        if self.teacher.iters == 0 || self.teacher.batch == 0 || self.teacher.samples == 0 || !(self.teacher.lr > 0.0) {
            return bad("teacher training settings must be positive".into());
        }
        let p = &self.plan;
        match (p.budget, p.budget_fraction) {
            (Some(b), _) if !(b > 0.0 && b.is_finite()) => return bad(format!("plan.budget {b} must be positive")),
            (None, Some(f)) if !(f > 0.0 && f.is_finite()) => {
                return bad(format!("plan.budget_fraction {f} must be positive"))
            }
            (None, None) if p.mode == PlanMode::Mckp => return bad("plan needs budget or budget_fraction".into()),
            _ => {}
        }
        if p.mode == PlanMode::Homogeneous {
            match (p.k, p.rate) {
                (Some(k), Some(r)) if k <= self.model.blocks && self.rates.contains(&r) => {}
                _ => {
                    return bad(format!(
                        "homogeneous plan needs k ≤ {} and a rate from {:?}",
                        self.model.blocks, self.rates
                    ))
                }
            }
        }
        if p.cost_tokens == Some(0) {
            return bad("plan.cost_tokens must be positive".into());
        }
        let f = &self.finetune;
        if f.iters == 0 || f.batch == 0 || f.samples == 0 || !(f.lr > 0.0) {
            return bad("finetune settings must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds is empty".into());
        }
        self.flops.dims().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.flops.blocks == 0 {
            return bad("flops.blocks must be positive".into());
        }
        Ok(())
    }

    pub fn cost_dims(&self) -> AttentionDims {
        let m = &self.model;
        let f = self.distill.feature_config(m.head_dim);
        AttentionDims::new(self.plan.cost_tokens.unwrap_or(m.tokens), m.heads, m.head_dim, m.value_dim, &f)
    }
}
