//! The transformer block `T(x) = f(A(x) + x)`.
//!
//! `A` is one of the three attention kernels followed by the output
//! projection, and `f` is a token-wise two-layer MLP
//! `f(z) = silu(z·W₁ + b₁)·W₂ + b₂`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::feature_map::{Dense, FeatureMapPair};
use super::kernels::{attention_backward, attention_forward, AttentionCache, HybridMode, Kernel};
use super::partition::{partition_tokens, TokenPartition};
use super::weights::{project_qkv, AttentionWeights, Qkv};
use crate::error::{Error, Result};
use crate::numerics::{silu, silu_grad, Parameters, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Softmax,
    Linear,
    Hybrid(usize),
}

impl BlockKind {
    /// Block kind for a hybrid rate; rate 1 is plain softmax.
    pub fn from_rate(rate: usize) -> Self {
        if rate == 1 {
            BlockKind::Softmax
        } else {
            BlockKind::Hybrid(rate)
        }
    }

    pub fn uses_features(self) -> bool {
        self != BlockKind::Softmax
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Softmax => write!(f, "softmax"),
            BlockKind::Linear => write!(f, "linear"),
            BlockKind::Hybrid(r) => write!(f, "hybrid:{r}"),
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(BlockKind::Softmax),
            "linear" => Ok(BlockKind::Linear),
            _ => s
                .strip_prefix("hybrid:")
                .and_then(|r| r.parse().ok())
                .filter(|&r| r >= 1)
                .map(BlockKind::Hybrid)
                .ok_or_else(|| Error::Argument(format!("unknown block kind {s:?}"))),
        }
    }
}

impl Serialize for BlockKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Dense,
    pub down: Dense,
}

impl FeedForward {
    pub fn init(rng: &mut SeededRng, width: usize, hidden: usize) -> Self {
        Self {
            up: Dense::init(rng, width, hidden),
            down: Dense::init(rng, hidden, width),
        }
    }
}

impl Parameters for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.up.visit(f);
        self.down.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionWeights,
    pub ffn: FeedForward,
    pub features: Option<FeatureMapPair>,
    pub kind: BlockKind,
    pub mode: HybridMode,
}

impl BlockParams {
    pub fn new(
        attention: AttentionWeights,
        ffn: FeedForward,
        features: Option<FeatureMapPair>,
        kind: BlockKind,
        mode: HybridMode,
    ) -> Result<Self> {
        let block = Self {
            attention,
            ffn,
            features,
            kind,
            mode,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_some() != self.kind.uses_features() {
            return Err(Error::Argument(format!(
                "block kind {} {} feature maps",
                self.kind,
                if self.kind.uses_features() { "requires" } else { "must not carry" }
            )));
        }
        if let BlockKind::Hybrid(0) = self.kind {
            return Err(Error::Argument("hybrid rate must be at least 1".into()));
        }
        let w = self.attention.width();
        if self.ffn.up.fan_in() != w || self.ffn.down.fan_out() != w || self.ffn.up.fan_out() != self.ffn.down.fan_in() {
            return Err(Error::Shape("feed-forward widths do not match the block".into()));
        }
        if let Some(f) = &self.features {
            if f.heads() != self.attention.heads() || f.input_dim() != self.attention.head_dim() {
                return Err(Error::Shape(format!(
                    "feature maps ({} heads, width {}) do not match attention ({} heads, width {})",
                    f.heads(),
                    f.input_dim(),
                    self.attention.heads(),
                    self.attention.head_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.attention.width()
    }

    fn partition(&self, n: usize) -> Result<Option<TokenPartition>> {
        match self.kind {
            BlockKind::Hybrid(r) => Ok(Some(partition_tokens(n, r)?)),
            _ => Ok(None),
        }
    }
}

impl Parameters for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.attention.visit(f);
        self.ffn.visit(f);
        if let Some(feat) = &self.features {
            feat.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.attention.visit_mut(f);
        self.ffn.visit_mut(f);
        if let Some(feat) = &mut self.features {
            feat.visit_mut(f);
        }
    }
}

fn kernel_for<'a>(params: &'a BlockParams, partition: Option<&'a TokenPartition>) -> Result<Kernel<'a>> {
    let missing = || Error::Argument(format!("block kind {} has no feature maps", params.kind));
    Ok(match params.kind {
        BlockKind::Softmax => Kernel::Softmax,
        BlockKind::Linear => Kernel::Linear(params.features.as_ref().ok_or_else(missing)?),
        BlockKind::Hybrid(_) => Kernel::Hybrid(
            params.features.as_ref().ok_or_else(missing)?,
            partition.expect("hybrid blocks carry a partition"),
            params.mode,
        ),
    })
}

/// Kernel output `y` (`N × M·H`, before the output projection).
pub fn attention_output(params: &BlockParams, x: &Tensor) -> Result<Tensor> {
    let qkv = project_qkv(x, &params.attention)?;
    let partition = params.partition(x.rows())?;
    Ok(attention_forward(kernel_for(params, partition.as_ref())?, &qkv)?.0)
}

/// Intermediate values of one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    input: Tensor,
    qkv: Qkv,
    partition: Option<TokenPartition>,
    attn_cache: AttentionCache,
    attn_out: Tensor,
    residual: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl BlockCache {
    /// Kernel output of this pass.
    pub fn attention_output(&self) -> &Tensor {
        &self.attn_out
    }
}

pub fn block_forward(params: &BlockParams, x: &Tensor) -> Result<Tensor> {
    Ok(block_forward_cached(params, x)?.0)
}

pub fn block_forward_cached(params: &BlockParams, x: &Tensor) -> Result<(Tensor, BlockCache)> {
    if x.rank() != 2 || x.cols() != params.width() {
        return Err(Error::Shape(format!(
            "block input {:?} against width {}",
            x.shape(),
            params.width()
        )));
    }
    let qkv = project_qkv(x, &params.attention)?;
    let partition = params.partition(x.rows())?;
    let (attn_out, attn_cache) = attention_forward(kernel_for(params, partition.as_ref())?, &qkv)?;
    let residual = attn_out.matmul(&params.attention.w_out)?.add(x)?;
    let hidden_pre = params.ffn.up.forward(&residual)?;
    let hidden = hidden_pre.map(silu);
    let out = params.ffn.down.forward(&hidden)?;
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            qkv,
            partition,
            attn_cache,
            attn_out,
            residual,
            hidden_pre,
            hidden,
        },
    ))
}

/// Backward pass of [`block_forward_cached`]; accumulates into `grads`
/// (same structure as `params`) and returns the input gradient.
pub fn block_backward(
    params: &BlockParams,
    cache: &BlockCache,
    dout: &Tensor,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    let dhidden = params.ffn.down.backward(&cache.hidden, dout, &mut grads.ffn.down)?;
    let dpre = dhidden.zip_map(&cache.hidden_pre, |g, z| g * silu_grad(z))?;
    let dres = params.ffn.up.backward(&cache.residual, &dpre, &mut grads.ffn.up)?;

    let mut dx = dres.clone();
    grads
        .attention
        .w_out
        .add_assign(&cache.attn_out.matmul_tn(&dres)?)?;
    let dy = dres.matmul_nt(&params.attention.w_out)?;

    let kernel = kernel_for(params, cache.partition.as_ref())?;
    let qkv_grads = attention_backward(kernel, &cache.qkv, &cache.attn_cache, &dy, grads.features.as_mut())?;

    let h = params.attention.heads();
    let (d, m) = (params.attention.head_dim(), params.attention.value_dim());
    let n = cache.input.rows();
    let mut dq = Tensor::zeros(&[n, d * h]);
    let mut dk = Tensor::zeros(&[n, d * h]);
    let mut dv = Tensor::zeros(&[n, m * h]);
    for head in 0..h {
        dq.set_columns(head * d, &qkv_grads.q[head]);
        dk.set_columns(head * d, &qkv_grads.k[head]);
        dv.set_columns(head * m, &qkv_grads.v[head]);
    }
    grads.attention.w_q.add_assign(&cache.input.matmul_tn(&dq)?)?;
    grads.attention.w_k.add_assign(&cache.input.matmul_tn(&dk)?)?;
    grads.attention.w_v.add_assign(&cache.input.matmul_tn(&dv)?)?;
    dx.add_assign(&dq.matmul_nt(&params.attention.w_q)?)?;
    dx.add_assign(&dk.matmul_nt(&params.attention.w_k)?)?;
    dx.add_assign(&dv.matmul_nt(&params.attention.w_v)?)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureMapConfig;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn block(rng: &mut SeededRng, kind: BlockKind) -> BlockParams {
        let (f, h, d, m) = (6, 2, 3, 2);
        let attention = AttentionWeights::random(rng, f, h, d, m, 1.0);
        let ffn = FeedForward::init(rng, f, 8);
        let features = kind
            .uses_features()
            .then(|| FeatureMapPair::init(rng, h, d, &FeatureMapConfig::for_head_dim(d)));
        BlockParams::new(attention, ffn, features, kind, HybridMode::Literal).unwrap()
    }

    #[test]
    fn zero_ffn_outputs_bias() {
        let mut rng = SeededRng::new(0);
        let mut b = block(&mut rng, BlockKind::Softmax);
        b.ffn.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|x| *x = 0.0));
        b.ffn.down.bias = Tensor::new(vec![6], vec![1.0, -2.0, 0.5, 0.0, 3.0, 4.0]).unwrap();
        let x = rng.gaussian(&[1, 6]);
        let out = block_forward(&b, &x).unwrap();
        assert_eq!(out.data(), b.ffn.down.bias.data());
    }

    #[test]
    fn hybrid_rate_one_matches_softmax_block() {
        let mut rng = SeededRng::new(1);
        let soft = block(&mut rng, BlockKind::Softmax);
        let mut hyb = soft.clone();
        hyb.kind = BlockKind::Hybrid(1);
        hyb.features = Some(FeatureMapPair::init(&mut rng, 2, 3, &FeatureMapConfig::for_head_dim(3)));
        let x = rng.gaussian(&[7, 6]);
        let a = block_forward(&soft, &x).unwrap();
        let b = block_forward(&hyb, &x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    }

    #[test]
    fn features_required_iff_not_softmax() {
        let mut rng = SeededRng::new(2);
        let mut b = block(&mut rng, BlockKind::Softmax);
        b.kind = BlockKind::Hybrid(2);
        assert!(b.validate().is_err());
        let mut b = block(&mut rng, BlockKind::Linear);
        b.kind = BlockKind::Softmax;
        assert!(b.validate().is_err());
    }

    #[test]
    fn kind_strings_roundtrip() {
        for kind in [BlockKind::Softmax, BlockKind::Linear, BlockKind::Hybrid(4)] {
            assert_eq!(kind.to_string().parse::<BlockKind>().unwrap(), kind);
        }
        assert!("hybrid:0".parse::<BlockKind>().is_err());
        assert!("dense".parse::<BlockKind>().is_err());
    }

    fn check_block_gradients(kind: BlockKind, mode: HybridMode, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let mut b = block(&mut rng, kind);
        b.mode = mode;
        let x = rng.gaussian(&[5, 6]);
        let probe = rng.gaussian(&[5, 6]);
        let loss = |p: &BlockParams, x: &Tensor| -> f64 {
            let out = block_forward(p, x).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = block_forward_cached(&b, &x).unwrap();
        let mut grads = b.zeros_like();
        let dx = block_backward(&b, &cache, &probe, &mut grads).unwrap();

        let theta = Tensor::new(vec![b.num_params()], b.flatten()).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let mut p = b.clone();
                p.assign_flat(t.data());
                loss(&p, &x)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        let rel = relative_error(&grads.flatten(), fd.data(), 1e-12);
        assert!(rel < 1e-6, "{kind} {mode:?}: parameter gradient rel err {rel}");
        let fd_x = finite_diff_grad(|x| loss(&b, x), &x, 1e-6).unwrap();
        let rel = relative_error(dx.data(), fd_x.data(), 1e-12);
        assert!(rel < 1e-6, "{kind} {mode:?}: input gradient rel err {rel}");
    }

    #[test]
    fn softmax_block_gradients() {
        check_block_gradients(BlockKind::Softmax, HybridMode::Literal, 10);
    }

    #[test]
    fn linear_block_gradients() {
        check_block_gradients(BlockKind::Linear, HybridMode::Literal, 11);
    }

    #[test]
    fn hybrid_block_gradients_both_modes() {
        check_block_gradients(BlockKind::Hybrid(2), HybridMode::Literal, 12);
        check_block_gradients(BlockKind::Hybrid(2), HybridMode::Consistent, 13);
        check_block_gradients(BlockKind::Hybrid(3), HybridMode::Literal, 14);
    }
}
