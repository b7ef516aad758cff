use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::ModelDims;
use crate::attention::{
    attention_output, block_backward, block_forward_cached, AttentionWeights, BlockCache, BlockKind,
    BlockParams, Dense, FeatureMap, FeatureMapPair, FeedForward, HybridMode,
};
use crate::error::{Error, Result};
use crate::numerics::io::TensorFile;
use crate::numerics::{Parameters, SeededRng, Tensor};

/// Gain on the feed-forward output layer that keeps activations near unit
/// scale through a stack of randomly initialized blocks.
const FFN_OUT_GAIN: f64 = 1.2;
const TIME_EMBED_SCALE: f64 = 0.5;
/// Query/key gain of the frozen-random fixture teacher.
pub const FIXTURE_QK_GAIN: f64 = 0.5;

/// A small denoising transformer: input embedding plus timestep embedding,
/// `B` blocks, output embedding predicting the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub embed_in: Dense,
    /// One row per timestep `0..=T`.
    pub time_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub embed_out: Dense,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    timestep: usize,
    input: Tensor,
    block_inputs: Vec<Tensor>,
    block_caches: Vec<BlockCache>,
    final_hidden: Tensor,
}

impl ModelCache {
    /// Input of every block.
    pub fn block_inputs(&self) -> &[Tensor] {
        &self.block_inputs
    }

    /// Attention kernel output of every block.
    pub fn attention_outputs(&self) -> Vec<Tensor> {
        self.block_caches
            .iter()
            .map(|c| c.attention_output().clone())
            .collect()
    }
}

impl ToyModel {
    /// All-softmax model with Gaussian weights (variance `1/fan_in`) drawn
    /// from `seed`; `qk_gain` scales the query/key projections.
    pub fn frozen_random(dims: ModelDims, seed: u64, qk_gain: f64) -> Result<Self> {
        dims.validate()?;
        let mut rng = SeededRng::new(seed);
        let embed_in = Dense::init(&mut rng, dims.width, dims.width);
        let time_embed = rng
            .gaussian(&[dims.timesteps + 1, dims.width])
            .scale(TIME_EMBED_SCALE);
        let blocks = (0..dims.blocks)
            .map(|_| {
                let attention = AttentionWeights::random(
                    &mut rng,
                    dims.width,
                    dims.heads,
                    dims.head_dim,
                    dims.value_dim,
                    qk_gain,
                );
                let mut ffn = FeedForward::init(&mut rng, dims.width, dims.ffn_hidden);
                ffn.down.weight = ffn.down.weight.scale(FFN_OUT_GAIN);
                BlockParams::new(attention, ffn, None, BlockKind::Softmax, HybridMode::Literal)
            })
            .collect::<Result<Vec<_>>>()?;
        let embed_out = Dense::init(&mut rng, dims.width, dims.width);
        Ok(Self {
            dims,
            embed_in,
            time_embed,
            blocks,
            embed_out,
        })
    }

    /// Frozen-random teacher at fixture scale.
    pub fn frozen_fixture(seed: u64) -> Result<Self> {
        Self::frozen_random(ModelDims::fixture(), seed, FIXTURE_QK_GAIN)
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    pub fn is_all_softmax(&self) -> bool {
        self.blocks.iter().all(|b| b.kind == BlockKind::Softmax)
    }

    fn check_input(&self, x: &Tensor, t: usize) -> Result<()> {
        if x.shape() != [self.dims.tokens, self.dims.width] {
            return Err(Error::Shape(format!(
                "model input {:?}, expected [{}, {}]",
                x.shape(),
                self.dims.tokens,
                self.dims.width
            )));
        }
        if t > self.dims.timesteps {
            return Err(Error::Argument(format!(
                "timestep {t} outside 0..={}",
                self.dims.timesteps
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.forward_cached(x, t)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, t: usize) -> Result<(Tensor, ModelCache)> {
        self.check_input(x, t)?;
        let mut h = self
            .embed_in
            .forward(x)?
            .add_row_vector(self.time_embed.row(t))?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block_forward_cached(block, &h)?;
            block_inputs.push(h);
            block_caches.push(cache);
            h = out;
        }
        let out = self.embed_out.forward(&h)?;
        Ok((
            out,
            ModelCache {
                timestep: t,
                input: x.clone(),
                block_inputs,
                block_caches,
                final_hidden: h,
            },
        ))
    }

    /// Accumulates parameter gradients of a loss with output gradient `dout`.
    pub fn backward(&self, cache: &ModelCache, dout: &Tensor, grads: &mut ToyModel) -> Result<()> {
        let mut dh = self
            .embed_out
            .backward(&cache.final_hidden, dout, &mut grads.embed_out)?;
        for (l, block) in self.blocks.iter().enumerate().rev() {
            dh = block_backward(block, &cache.block_caches[l], &dh, &mut grads.blocks[l])?;
        }
        for (g, s) in grads
            .time_embed
            .row_mut(cache.timestep)
            .iter_mut()
            .zip(dh.column_sums())
        {
            *g += s;
        }
        self.embed_in.backward(&cache.input, &dh, &mut grads.embed_in)?;
        Ok(())
    }

    /// Kernel output of block `l` on input `x`.
    pub fn block_attention(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        attention_output(&self.blocks[l], x)
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let manifest = ModelManifest {
            dims: self.dims,
            kinds: self.kinds(),
            modes: self.blocks.iter().map(|b| b.mode).collect(),
            features: self
                .blocks
                .iter()
                .map(|b| b.features.as_ref().map(FeatureShape::of))
                .collect(),
            metadata,
        };
        let mut file = TensorFile::new(serde_json::to_value(&manifest)?);
        let mut index = 0;
        self.visit(&mut |t| {
            file.push(format!("param.{index:04}"), t.clone());
            index += 1;
        });
        file.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::load(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let manifest: ModelManifest =
            serde_json::from_value(file.meta.clone()).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.kinds.len() != manifest.dims.blocks
            || manifest.modes.len() != manifest.dims.blocks
            || manifest.features.len() != manifest.dims.blocks
        {
            return Err(bad("block lists disagree with dims".into()));
        }
        let mut model = ToyModel::frozen_random(manifest.dims, 0, 1.0)?;
        for (l, block) in model.blocks.iter_mut().enumerate() {
            block.kind = manifest.kinds[l];
            block.mode = manifest.modes[l];
            block.features = manifest.features[l]
                .map(|shape| shape.zeros(manifest.dims.heads, manifest.dims.head_dim));
        }
        let mut shape_error = None;
        let mut tensors = file.tensors.iter();
        model.visit_mut(&mut |t| match tensors.next() {
            Some((name, stored)) if stored.shape() == t.shape() => *t = stored.clone(),
            Some((name, stored)) => {
                shape_error.get_or_insert(format!("{name}: shape {:?} vs {:?}", stored.shape(), t.shape()));
            }
            None => {
                shape_error.get_or_insert("too few tensors".to_string());
            }
        });
        if let Some(e) = shape_error {
            return Err(bad(e));
        }
        if tensors.next().is_some() {
            return Err(bad("too many tensors".into()));
        }
        for block in &model.blocks {
            block.validate().map_err(|e| bad(e.to_string()))?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelManifest {
    dims: ModelDims,
    kinds: Vec<BlockKind>,
    modes: Vec<HybridMode>,
    features: Vec<Option<FeatureShape>>,
    metadata: serde_json::Value,
}

/// Layer widths of a feature map, enough to rebuild it before loading weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FeatureShape {
    degree: usize,
    slice_width: usize,
    depth: usize,
    hidden: usize,
}

impl FeatureShape {
    fn of(pair: &FeatureMapPair) -> Self {
        let m = &pair.query[0];
        Self {
            degree: m.degree(),
            slice_width: m.slice_width(),
            depth: m.layers().len(),
            hidden: m.hidden_dim(),
        }
    }

    fn zeros(self, heads: usize, head_dim: usize) -> FeatureMapPair {
        let config = crate::attention::FeatureMapConfig {
            degree: self.degree,
            slice_width: self.slice_width,
            depth: self.depth,
            hidden: self.hidden,
        };
        let make = || FeatureMap::init(&mut SeededRng::new(0), head_dim, &config).zeros_like();
        FeatureMapPair {
            query: (0..heads).map(|_| make()).collect(),
            key: (0..heads).map(|_| make()).collect(),
        }
    }
}

impl Parameters for ToyModel {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.embed_in.visit(f);
        f(&self.time_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.embed_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.embed_in.visit_mut(f);
        f(&mut self.time_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.embed_out.visit_mut(f);
    }
}
