//! Closed-form FLOP counts for the attention kernels.
//!
//! Counts are per head and summed over heads. A multiply-add is two FLOPs.
//! With `N` queries, `S` exact-softmax keys, `L` linear keys, feature width
//! `Φ = P·D′` and `C_φ` the per-token cost of φ:
//!
//! ```text
//! softmax part      2·N·S·D + 5·N·S + 2·N·S·M
//! φ evaluation      (N + L) · C_φ
//! key aggregates    2·L·Φ·M + L·Φ
//! per-query terms   2·N·Φ·M + 2·N·Φ + 2·N·M
//! C_φ               Σ_layers (2·in·out + out + out) + Φ
//! ```
//!
//! Softmax attention is `S = N, L = 0` without any φ terms; linear attention
//! is `S = 0, L = N`; hybrid rate `R` has `S = ⌈N/R⌉`, `L = N − S`. A hybrid
//! configuration without linear keys (rate 1) costs exactly as much as
//! softmax.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockKind, FeatureMapConfig};
use crate::error::{Error, Result};

/// FLOPs per score entry for the stabilized softmax: max, subtract, exp, sum, divide.
pub const SOFTMAX_FLOPS_PER_SCORE: f64 = 5.0;
/// FLOPs per element for a SiLU or softplus activation.
pub const ACTIVATION_FLOPS: f64 = 1.0;
/// FLOPs per element for raising a feature to its polynomial degree.
pub const POWER_FLOPS: f64 = 1.0;

/// Dimensions that determine attention cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDims {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub degree: usize,
    pub slice_width: usize,
    pub phi_depth: usize,
    pub phi_hidden: usize,
}

impl AttentionDims {
    pub fn new(tokens: usize, heads: usize, head_dim: usize, value_dim: usize, features: &FeatureMapConfig) -> Self {
        Self {
            tokens,
            heads,
            head_dim,
            value_dim,
            degree: features.degree,
            slice_width: features.slice_width,
            phi_depth: features.depth,
            phi_hidden: features.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tokens", self.tokens),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("value_dim", self.value_dim),
            ("degree", self.degree),
            ("slice_width", self.slice_width),
            ("phi_depth", self.phi_depth),
            ("phi_hidden", self.phi_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Argument(format!("attention dimension {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_tokens(self, tokens: usize) -> Self {
        Self { tokens, ..self }
    }

    pub fn feature_width(&self) -> usize {
        self.degree * self.slice_width
    }
}

/// Per-token cost of one feature map evaluation.
pub fn feature_map_flops(dims: &AttentionDims) -> f64 {
    let out_width = dims.feature_width() as f64;
    let mut total = 0.0;
    let mut fan_in = dims.head_dim as f64;
    for l in 0..dims.phi_depth {
        let fan_out = if l + 1 == dims.phi_depth {
            out_width
        } else {
            dims.phi_hidden as f64
        };
        total += 2.0 * fan_in * fan_out + fan_out + ACTIVATION_FLOPS * fan_out;
        fan_in = fan_out;
    }
    total + POWER_FLOPS * out_width
}

fn softmax_part(n: f64, s: f64, d: f64, m: f64) -> f64 {
    2.0 * n * s * d + SOFTMAX_FLOPS_PER_SCORE * n * s + 2.0 * n * s * m
}

fn linear_part(dims: &AttentionDims, n: f64, l: f64) -> f64 {
    let phi = dims.feature_width() as f64;
    let m = dims.value_dim as f64;
    (n + l) * feature_map_flops(dims)
        + 2.0 * l * phi * m
        + l * phi
        + 2.0 * n * phi * m
        + 2.0 * n * phi
        + 2.0 * n * m
}

/// Attention FLOPs of one block of the given kind, summed over heads.
pub fn flops_attention(kind: BlockKind, dims: &AttentionDims) -> f64 {
    let n = dims.tokens as f64;
    let (d, m) = (dims.head_dim as f64, dims.value_dim as f64);
    let per_head = match kind {
        BlockKind::Softmax => softmax_part(n, n, d, m),
        BlockKind::Linear => linear_part(dims, n, n),
        BlockKind::Hybrid(r) => {
            let s = dims.tokens.div_ceil(r.max(1));
            let l = dims.tokens - s;
            if l == 0 {
                softmax_part(n, n, d, m)
            } else {
                softmax_part(n, s as f64, d, m) + linear_part(dims, n, l as f64)
            }
        }
    };
    per_head * dims.heads as f64
}

/// Cost of hybrid rate `r` (rate 1 is softmax).
pub fn flops_at_rate(rate: usize, dims: &AttentionDims) -> f64 {
    flops_attention(BlockKind::from_rate(rate), dims)
}

/// Smallest token count from which cost is strictly decreasing across the
/// sorted candidate rates for every larger count up to `max_tokens`.
pub fn monotone_crossover(dims: &AttentionDims, rates: &[usize], max_tokens: usize) -> Option<usize> {
    let mut sorted = rates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let decreasing = |n: usize| {
        let d = dims.with_tokens(n);
        sorted
            .windows(2)
            .all(|w| flops_at_rate(w[1], &d) < flops_at_rate(w[0], &d))
    };
    if !decreasing(max_tokens) {
        return None;
    }
    let mut crossover = max_tokens;
    while crossover > 1 && decreasing(crossover - 1) {
        crossover -= 1;
    }
    Some(crossover)
}

/// FLOPs of the non-attention parts of a block: the four projections and the
/// feed-forward MLP.
pub fn block_overhead_flops(dims: &AttentionDims, width: usize, ffn_hidden: usize) -> f64 {
    let n = dims.tokens as f64;
    let f = width as f64;
    let qk = (dims.head_dim * dims.heads) as f64;
    let v = (dims.value_dim * dims.heads) as f64;
    let projections = 2.0 * n * f * (2.0 * qk + v) + 2.0 * n * v * f;
    let ffn = 2.0 * n * f * ffn_hidden as f64 * 2.0;
    projections + ffn
}

/// Share of a softmax block's FLOPs spent in the attention kernel.
pub fn attention_share(dims: &AttentionDims, width: usize, ffn_hidden: usize) -> f64 {
    let attn = flops_attention(BlockKind::Softmax, dims);
    attn / (attn + block_overhead_flops(dims, width, ffn_hidden))
}

/// Per-block, per-rate FLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub rates: Vec<usize>,
    pub costs: Vec<Vec<f64>>,
    pub dims: AttentionDims,
}

impl CostTable {
    pub fn blocks(&self) -> usize {
        self.costs.len()
    }
}

pub fn build_cost_table(dims: &AttentionDims, rates: &[usize], blocks: usize) -> Result<CostTable> {
    dims.validate()?;
    if rates.is_empty() || rates.contains(&0) || blocks == 0 {
        return Err(Error::Argument("need ≥ 1 block and positive candidate rates".into()));
    }
    let row: Vec<f64> = rates.iter().map(|&r| flops_at_rate(r, dims)).collect();
    Ok(CostTable {
        rates: rates.to_vec(),
        costs: vec![row; blocks],
        dims: *dims,
    })
}
