//! The learnable non-negative polynomial feature map φ.
//!
//! φ: ℝᴰ → ℝᴾ·ᴰ′ runs a small per-head MLP ψ (SiLU hidden activations),
//! applies softplus `a(z) = ln(1 + eᶻ)` to the last layer, splits the result
//! into `P` slices of width `D′` and raises slice `p` (1-based) to the
//! elementwise power `p`. Softplus keeps every slice, and therefore every
//! power, non-negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, silu, silu_grad, softplus, Parameters, SeededRng, Tensor};

/// Token-wise affine layer `x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.cols()] {
            return Err(Error::Shape(format!(
                "dense weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Weights ~ 𝒩(0, 1/fan_in), zero bias.
    pub fn init(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Self {
        let weight = rng
            .gaussian(&[fan_in, fan_out])
            .scale(1.0 / (fan_in as f64).sqrt());
        Self {
            weight,
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_vector(self.bias.data())
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, grads: &mut Dense) -> Result<Tensor> {
        grads.weight.add_assign(&x.matmul_tn(dout)?)?;
        for (g, s) in grads.bias.data_mut().iter_mut().zip(dout.column_sums()) {
            *g += s;
        }
        dout.matmul_nt(&self.weight)
    }
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Shape of the φ network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapConfig {
    /// Polynomial degree `P`.
    pub degree: usize,
    /// Slice width `D′`.
    pub slice_width: usize,
    /// Number of dense layers (≥ 1).
    pub depth: usize,
    /// Width of hidden layers (unused when depth is 1).
    pub hidden: usize,
}

impl FeatureMapConfig {
    /// Two-layer MLP, degree 2, `D′ = D`, hidden width `P·D′`.
    pub fn for_head_dim(head_dim: usize) -> Self {
        Self {
            degree: 2,
            slice_width: head_dim,
            depth: 2,
            hidden: 2 * head_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.degree * self.slice_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.slice_width == 0 || self.depth == 0 || self.hidden == 0 {
            return Err(Error::Argument(format!(
                "feature map config must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    layers: Vec<Dense>,
    degree: usize,
    slice_width: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    layer_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    softplus_out: Tensor,
}

impl FeatureMap {
    pub fn new(layers: Vec<Dense>, degree: usize, slice_width: usize) -> Result<Self> {
        if layers.is_empty() || degree == 0 || slice_width == 0 {
            return Err(Error::Argument(
                "feature map needs ≥ 1 layer and positive degree and slice width".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].fan_out(),
                    pair[1].fan_in()
                )));
            }
        }
        let out = layers.last().expect("non-empty").fan_out();
        if out != degree * slice_width {
            return Err(Error::Shape(format!(
                "final layer width {out} != degree {degree} x slice width {slice_width}"
            )));
        }
        Ok(Self {
            layers,
            degree,
            slice_width,
        })
    }

    pub fn init(rng: &mut SeededRng, input_dim: usize, config: &FeatureMapConfig) -> Self {
        let mut layers = Vec::with_capacity(config.depth);
        let mut fan_in = input_dim;
        for l in 0..config.depth {
            let fan_out = if l + 1 == config.depth {
                config.output_dim()
            } else {
                config.hidden
            };
            layers.push(Dense::init(rng, fan_in, fan_out));
            fan_in = fan_out;
        }
        Self {
            layers,
            degree: config.degree,
            slice_width: config.slice_width,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn slice_width(&self) -> usize {
        self.slice_width
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.degree * self.slice_width
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].fan_out()
    }

    /// Degree applied to output column `c`.
    fn power_of(&self, c: usize) -> i32 {
        (c / self.slice_width + 1) as i32
    }

    pub fn forward_cached(&self, u: &Tensor) -> Result<(Tensor, FeatureCache)> {
        if u.rank() != 2 || u.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature map expects width {}, got shape {:?}",
                self.input_dim(),
                u.shape()
            )));
        }
        let depth = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut h = u.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            layer_inputs.push(h);
            h = if l + 1 == depth { z.map(softplus) } else { z.map(silu) };
            pre_activations.push(z);
        }
        let softplus_out = h;
        let cols = self.output_dim();
        let mut phi = softplus_out.clone();
        for row in phi.data_mut().chunks_mut(cols) {
            for (c, x) in row.iter_mut().enumerate() {
                *x = x.powi(self.power_of(c));
            }
        }
        Ok((
            phi,
            FeatureCache {
                layer_inputs,
                pre_activations,
                softplus_out,
            },
        ))
    }

    /// Backpropagates `dphi` (same shape as the output), accumulating
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(&self, cache: &FeatureCache, dphi: &Tensor, grads: &mut FeatureMap) -> Result<Tensor> {
        let cols = self.output_dim();
        let depth = self.layers.len();
        // d phi / d a = p · a^(p-1), then through softplus: a'(z) = sigmoid(z).
        let z_last = &cache.pre_activations[depth - 1];
        let mut dz = Tensor::zeros(dphi.shape());
        for (i, row) in dz.data_mut().chunks_mut(cols).enumerate() {
            for (c, d) in row.iter_mut().enumerate() {
                let p = self.power_of(c);
                let a = cache.softplus_out.get(i, c);
                let dphi_da = if p == 1 { 1.0 } else { p as f64 * a.powi(p - 1) };
                *d = dphi.get(i, c) * dphi_da * sigmoid(z_last.get(i, c));
            }
        }
        for l in (0..depth).rev() {
            let dh = self.layers[l].backward(&cache.layer_inputs[l], &dz, &mut grads.layers[l])?;
            if l == 0 {
                return Ok(dh);
            }
            let z_prev = &cache.pre_activations[l - 1];
            dz = dh.zip_map(z_prev, |g, z| g * silu_grad(z))?;
        }
        unreachable!("feature map has at least one layer")
    }
}

impl Parameters for FeatureMap {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for layer in &self.layers {
            layer.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}

/// Applies φ row-wise to `u` (`rows × D`), producing `rows × P·D′`.
pub fn apply_feature_map(phi: &FeatureMap, u: &Tensor) -> Result<Tensor> {
    Ok(phi.forward_cached(u)?.0)
}

/// Separate query and key feature maps for every head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapPair {
    pub query: Vec<FeatureMap>,
    pub key: Vec<FeatureMap>,
}

impl FeatureMapPair {
    pub fn new(query: Vec<FeatureMap>, key: Vec<FeatureMap>) -> Result<Self> {
        if query.is_empty() || query.len() != key.len() {
            return Err(Error::Shape(format!(
                "{} query maps vs {} key maps",
                query.len(),
                key.len()
            )));
        }
        let d = query[0].input_dim();
        let out = query[0].output_dim();
        if query
            .iter()
            .chain(&key)
            .any(|m| m.input_dim() != d || m.output_dim() != out)
        {
            return Err(Error::Shape("feature maps disagree on widths".into()));
        }
        Ok(Self { query, key })
    }

    /// Query maps first (all heads), then key maps, each from the same stream.
    pub fn init(rng: &mut SeededRng, heads: usize, head_dim: usize, config: &FeatureMapConfig) -> Self {
        let query = (0..heads)
            .map(|_| FeatureMap::init(rng, head_dim, config))
            .collect();
        let key = (0..heads)
            .map(|_| FeatureMap::init(rng, head_dim, config))
            .collect();
        Self { query, key }
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn input_dim(&self) -> usize {
        self.query[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.query[0].output_dim()
    }
}

impl Parameters for FeatureMapPair {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for m in self.query.iter().chain(&self.key) {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for m in self.query.iter_mut().chain(self.key.iter_mut()) {
            m.visit_mut(f);
        }
    }
}
