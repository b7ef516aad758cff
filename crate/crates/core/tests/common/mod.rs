//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use attn_surgery::attention::{FeatureMap, FeatureMapConfig, FeatureMapPair, HybridMode, Qkv, TokenPartition, DENOMINATOR_GUARD};
use attn_surgery::numerics::{SeededRng, Tensor};

pub struct Fixture {
    pub qkv: Qkv,
    pub features: FeatureMapPair,
}

/// Random heads with `N ≤ max_n`, `D, M ≤ max_dim`, `H ≤ max_heads`.
pub fn random_fixture(seed: u64, max_n: usize, max_dim: usize, max_heads: usize, max_degree: usize) -> Fixture {
    let mut rng = SeededRng::new(seed);
    let n = 1 + rng.below(max_n);
    let d = 1 + rng.below(max_dim);
    let m = 1 + rng.below(max_dim);
    let heads = 1 + rng.below(max_heads);
    let scale = 0.5 + 1.5 * rng.uniform();
    let q = (0..heads).map(|_| rng.gaussian(&[n, d]).scale(scale)).collect();
    let k = (0..heads).map(|_| rng.gaussian(&[n, d]).scale(scale)).collect();
    let v = (0..heads).map(|_| rng.gaussian(&[n, m])).collect();
    let cfg = FeatureMapConfig {
        degree: 1 + rng.below(max_degree),
        slice_width: 1 + rng.below(d + 1),
        depth: 1 + rng.below(3),
        hidden: 1 + rng.below(2 * d + 1),
    };
    let features = FeatureMapPair::init(&mut rng, heads, d, &cfg);
    Fixture {
        qkv: Qkv::new(q, k, v).unwrap(),
        features,
    }
}

pub fn with_constant_values(qkv: &Qkv, c: f64) -> Qkv {
    let v = qkv.v.iter().map(|t| Tensor::full(t.shape(), c)).collect();
    Qkv::new(qkv.q.clone(), qkv.k.clone(), v).unwrap()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// φ of a single row, evaluated layer by layer and slice by slice.
pub fn feature_oracle(map: &FeatureMap, u: &[f64]) -> Vec<f64> {
    let mut h = u.to_vec();
    let depth = map.layers().len();
    for (l, layer) in map.layers().iter().enumerate() {
        let mut out = vec![0.0; layer.fan_out()];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut z = layer.bias.data()[o];
            for (i, x) in h.iter().enumerate() {
                z += x * layer.weight.get(i, o);
            }
            *slot = if l + 1 == depth { softplus(z) } else { silu(z) };
        }
        h = out;
    }
    let mut phi = Vec::with_capacity(h.len());
    for p in 0..map.degree() {
        for c in 0..map.slice_width() {
            let base = h[p * map.slice_width() + c];
            let mut x = 1.0;
            for _ in 0..=p {
                x *= base;
            }
            phi.push(x);
        }
    }
    phi
}

fn score(q: &[f64], k: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..q.len() {
        s += q[c] * k[c];
    }
    s / (q.len() as f64).sqrt()
}

fn kernel_value(fq: &[f64], fk: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..fq.len() {
        s += fq[c] * fk[c];
    }
    s
}

pub enum OracleKernel<'a> {
    Softmax,
    Linear(&'a FeatureMapPair),
    Hybrid(&'a FeatureMapPair, &'a TokenPartition, HybridMode),
}

/// Unnormalized mixing weights of query `i` against every key, plus the
/// denominator the kernel divides by.
fn raw_weights(kernel: &OracleKernel, qkv: &Qkv, h: usize, i: usize) -> (Vec<f64>, f64) {
    let n = qkv.tokens();
    let q = qkv.q[h].row(i);
    let mut w = vec![0.0; n];
    match kernel {
        OracleKernel::Softmax => {
            let mut c = f64::NEG_INFINITY;
            for j in 0..n {
                c = c.max(score(q, qkv.k[h].row(j)));
            }
            for j in 0..n {
                w[j] = (score(q, qkv.k[h].row(j)) - c).exp();
            }
            let den = w.iter().sum();
            (w, den)
        }
        OracleKernel::Linear(f) => {
            let fq = feature_oracle(&f.query[h], q);
            for j in 0..n {
                w[j] = kernel_value(&fq, &feature_oracle(&f.key[h], qkv.k[h].row(j)));
            }
            let den = w.iter().sum::<f64>().max(DENOMINATOR_GUARD);
            (w, den)
        }
        OracleKernel::Hybrid(f, part, mode) => {
            let fq = feature_oracle(&f.query[h], q);
            let mut c = f64::NEG_INFINITY;
            for &j in part.softmax_indices() {
                c = c.max(score(q, qkv.k[h].row(j)));
            }
            let gain = match mode {
                HybridMode::Literal => 1.0,
                HybridMode::Consistent if c.is_finite() => (-c).exp(),
                HybridMode::Consistent => 1.0,
            };
            for &j in part.softmax_indices() {
                w[j] = (score(q, qkv.k[h].row(j)) - c).exp();
            }
            for &j in part.linear_indices() {
                w[j] = gain * kernel_value(&fq, &feature_oracle(&f.key[h], qkv.k[h].row(j)));
            }
            let den = w.iter().sum::<f64>().max(DENOMINATOR_GUARD);
            (w, den)
        }
    }
}

/// Normalized weights `wᵢⱼ / denᵢ` for one head.
pub fn implied_weights(kernel: &OracleKernel, qkv: &Qkv, h: usize) -> Vec<Vec<f64>> {
    (0..qkv.tokens())
        .map(|i| {
            let (w, den) = raw_weights(kernel, qkv, h, i);
            w.into_iter().map(|x| x / den).collect()
        })
        .collect()
}

/// Heads concatenated to `N × M·H`, each entry a term-by-term sum.
pub fn attention_oracle(kernel: &OracleKernel, qkv: &Qkv) -> Tensor {
    let (n, m, heads) = (qkv.tokens(), qkv.value_dim(), qkv.heads());
    let mut y = Tensor::zeros(&[n, m * heads]);
    for h in 0..heads {
        for i in 0..n {
            let (w, den) = raw_weights(kernel, qkv, h, i);
            for c in 0..m {
                let mut num = 0.0;
                for j in 0..n {
                    num += w[j] * qkv.v[h].get(j, c);
                }
                y.set(i, h * m + c, num / den);
            }
        }
    }
    y
}

/// Largest `|a − b| / max(|b|, floor)` over all entries.
pub fn max_relative(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Counts attention FLOPs by walking the loops of a direct implementation.
pub struct FlopCounter {
    pub n: usize,
    pub heads: usize,
    pub d: usize,
    pub m: usize,
    pub degree: usize,
    pub slice_width: usize,
    pub depth: usize,
    pub hidden: usize,
}

impl FlopCounter {
    fn phi_per_token(&self) -> u64 {
        let out = self.degree * self.slice_width;
        let mut ops = 0u64;
        let mut fan_in = self.d;
        for l in 0..self.depth {
            let fan_out = if l + 1 == self.depth { out } else { self.hidden };
            for _ in 0..fan_out {
                for _ in 0..fan_in {
                    ops += 2; // multiply, add
                }
                ops += 1; // bias
                ops += 1; // activation
            }
            fan_in = fan_out;
        }
        ops + out as u64 // powers
    }

    pub fn count(&self, rate: usize) -> u64 {
        let softmax: Vec<usize> = (0..self.n).filter(|j| j % rate == 0).collect();
        let linear = self.n - softmax.len();
        let phi = (self.degree * self.slice_width) as u64;
        let mut ops = 0u64;
        for _ in 0..self.heads {
            let mut head = 0u64;
            // one query row of the exact part
            let mut row = 0u64;
            for _ in &softmax {
                row += 2 * self.d as u64; // score
                row += 5; // max, subtract, exp, sum, divide
                row += 2 * self.m as u64; // value accumulation
            }
            for _ in 0..self.n {
                head += row;
            }
            if linear > 0 {
                let per_token = self.phi_per_token();
                for _ in 0..(self.n + linear) {
                    head += per_token;
                }
                for _ in 0..linear {
                    head += 2 * phi * self.m as u64 + phi; // S and z aggregates
                }
                for _ in 0..self.n {
                    head += 2 * phi * self.m as u64 + 2 * phi + 2 * self.m as u64;
                }
            }
            ops += head;
        }
        ops
    }
}
