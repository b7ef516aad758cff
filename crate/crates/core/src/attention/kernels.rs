//! Softmax, linear and hybrid attention kernels with their backward passes.
//!
//! All kernels take per-head `q`, `k` (`N × D`) and `v` (`N × M`) and return
//! the heads concatenated to `N × M·H`.
//!
//! Hybrid attention, for query `i`, mixes exact exponentials over the
//! softmax tokens `T_S` with the feature-map kernel over the linear tokens
//! `T_L`:
//!
//! ```text
//!        Σ_{j∈T_S} exp(sᵢⱼ − cᵢ) vⱼ + gᵢ φ_q(qᵢ) Σ_{j∈T_L} φ_k(kⱼ)ᵀ vⱼ
//! ŷᵢ = ───────────────────────────────────────────────────────────────
//!        Σ_{j∈T_S} exp(sᵢⱼ − cᵢ)    + gᵢ φ_q(qᵢ) Σ_{j∈T_L} φ_k(kⱼ)ᵀ
//! ```
//!
//! with `sᵢⱼ = qᵢ·kⱼ/√D` and `cᵢ = max_{j∈T_S} sᵢⱼ`. [`HybridMode::Literal`]
//! uses `gᵢ = 1`; [`HybridMode::Consistent`] uses `gᵢ = e^{−cᵢ}`, which makes
//! the result equal to the unstabilized mixture.
//!
//! Denominators of the linear and hybrid kernels are clamped from below by
//! [`DENOMINATOR_GUARD`]. Whenever `T_S` is non-empty the hybrid denominator
//! is at least 1 and the clamp is inactive.

use serde::{Deserialize, Serialize};

use super::feature_map::{FeatureCache, FeatureMap, FeatureMapPair};
use super::partition::TokenPartition;
use super::weights::{concat_heads, Qkv};
use crate::error::{Error, Result};
use crate::numerics::{dot, row_softmax_stabilized, Tensor};

/// Lower bound applied to linear/hybrid denominators.
pub const DENOMINATOR_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HybridMode {
    /// Stabilizer applied to the exponential terms only.
    #[default]
    Literal,
    /// Stabilizer applied to the linear terms as well.
    Consistent,
}

/// Which kernel to run, with the parameters it needs.
#[derive(Clone, Copy, Debug)]
pub enum Kernel<'a> {
    Softmax,
    Linear(&'a FeatureMapPair),
    Hybrid(&'a FeatureMapPair, &'a TokenPartition, HybridMode),
}

pub fn softmax_attention(qkv: &Qkv) -> Result<Tensor> {
    Ok(attention_forward(Kernel::Softmax, qkv)?.0)
}

/// `yᵢ = φ_q(qᵢ)·S / max(φ_q(qᵢ)·z, ε)` with `S = Σⱼ φ_k(kⱼ)ᵀvⱼ`, `z = Σⱼ φ_k(kⱼ)`.
///
/// The key aggregates are formed once, so the cost is linear in `N`.
pub fn linear_attention(qkv: &Qkv, features: &FeatureMapPair) -> Result<Tensor> {
    qkv.validate()?;
    check_features(qkv, features)?;
    let mut outputs = Vec::with_capacity(qkv.heads());
    for h in 0..qkv.heads() {
        let phi_q = features.query[h].forward_cached(&qkv.q[h])?.0;
        let phi_k = features.key[h].forward_cached(&qkv.k[h])?.0;
        let kv = phi_k.matmul_tn(&qkv.v[h])?;
        let ksum = phi_k.column_sums();
        let mut y = phi_q.matmul(&kv)?;
        for i in 0..y.rows() {
            let den = dot(phi_q.row(i), &ksum).max(DENOMINATOR_GUARD);
            y.row_mut(i).iter_mut().for_each(|x| *x /= den);
        }
        outputs.push(y);
    }
    Ok(concat_heads(&outputs))
}

pub fn hybrid_attention(
    qkv: &Qkv,
    features: &FeatureMapPair,
    partition: &TokenPartition,
    mode: HybridMode,
) -> Result<Tensor> {
    Ok(attention_forward(Kernel::Hybrid(features, partition, mode), qkv)?.0)
}

fn check_features(qkv: &Qkv, features: &FeatureMapPair) -> Result<()> {
    if features.heads() != qkv.heads() || features.input_dim() != qkv.head_dim() {
        return Err(Error::Shape(format!(
            "feature maps for {} heads of width {} against {} heads of width {}",
            features.heads(),
            features.input_dim(),
            qkv.heads(),
            qkv.head_dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum HeadCache {
    Softmax { probs: Tensor },
    Hybrid(HybridHeadCache),
}

/// Forward-pass state needed by [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    heads: Vec<HeadCache>,
}

#[derive(Clone, Debug)]
struct LinearPart {
    phi_q: Tensor,
    phi_q_cache: FeatureCache,
    phi_k: Tensor,
    phi_k_cache: FeatureCache,
    kv: Tensor,
    ksum: Vec<f64>,
}

#[derive(Clone, Debug)]
struct HybridHeadCache {
    linear: Option<LinearPart>,
    /// `exp(sᵢⱼ − cᵢ)` over the softmax tokens, `N × |T_S|`.
    weights: Vec<f64>,
    argmax: Vec<usize>,
    gain: Vec<f64>,
    den_raw: Vec<f64>,
    den: Vec<f64>,
    y: Tensor,
}

/// Runs the selected kernel over every head, keeping what the backward pass needs.
pub fn attention_forward(kernel: Kernel<'_>, qkv: &Qkv) -> Result<(Tensor, AttentionCache)> {
    qkv.validate()?;
    let n = qkv.tokens();
    let all: Vec<usize> = (0..n).collect();
    let mut outputs = Vec::with_capacity(qkv.heads());
    let mut caches = Vec::with_capacity(qkv.heads());
    for h in 0..qkv.heads() {
        let (q, k, v) = (&qkv.q[h], &qkv.k[h], &qkv.v[h]);
        match kernel {
            Kernel::Softmax => {
                let (y, probs) = softmax_head(q, k, v)?;
                outputs.push(y);
                caches.push(HeadCache::Softmax { probs });
            }
            Kernel::Linear(features) => {
                check_features(qkv, features)?;
                let (y, cache) = hybrid_head(
                    q,
                    k,
                    v,
                    &features.query[h],
                    &features.key[h],
                    &[],
                    &all,
                    HybridMode::Literal,
                )?;
                outputs.push(y);
                caches.push(HeadCache::Hybrid(cache));
            }
            Kernel::Hybrid(features, partition, mode) => {
                check_features(qkv, features)?;
                if partition.n_tokens() != n {
                    return Err(Error::Shape(format!(
                        "partition over {} tokens applied to {n} tokens",
                        partition.n_tokens()
                    )));
                }
                let (y, cache) = hybrid_head(
                    q,
                    k,
                    v,
                    &features.query[h],
                    &features.key[h],
                    partition.softmax_indices(),
                    partition.linear_indices(),
                    mode,
                )?;
                outputs.push(y);
                caches.push(HeadCache::Hybrid(cache));
            }
        }
    }
    Ok((concat_heads(&outputs), AttentionCache { heads: caches }))
}

/// Per-head input gradients of an attention kernel.
#[derive(Clone, Debug)]
pub struct QkvGrads {
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Backward pass of [`attention_forward`].
///
/// `dy` is the gradient of the concatenated output. Feature-map parameter
/// gradients are accumulated into `feature_grads` when the kernel uses φ.
pub fn attention_backward(
    kernel: Kernel<'_>,
    qkv: &Qkv,
    cache: &AttentionCache,
    dy: &Tensor,
    mut feature_grads: Option<&mut FeatureMapPair>,
) -> Result<QkvGrads> {
    let (n, m) = (qkv.tokens(), qkv.value_dim());
    if dy.shape() != [n, m * qkv.heads()] {
        return Err(Error::Shape(format!(
            "output gradient {:?}, expected [{n}, {}]",
            dy.shape(),
            m * qkv.heads()
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut grads = QkvGrads {
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
    };
    for (h, head_cache) in cache.heads.iter().enumerate() {
        let (q, k, v) = (&qkv.q[h], &qkv.k[h], &qkv.v[h]);
        let dy_h = dy.columns(h * m, m);
        let (dq, dk, dv) = match (head_cache, kernel) {
            (HeadCache::Softmax { probs }, Kernel::Softmax) => softmax_head_backward(q, k, v, probs, &dy_h)?,
            (HeadCache::Hybrid(c), Kernel::Linear(features)) => {
                let (gq, gk) = head_grads(&mut feature_grads, h);
                hybrid_head_backward(
                    q,
                    k,
                    v,
                    &features.query[h],
                    &features.key[h],
                    &[],
                    &all,
                    HybridMode::Literal,
                    c,
                    &dy_h,
                    gq,
                    gk,
                )?
            }
            (HeadCache::Hybrid(c), Kernel::Hybrid(features, partition, mode)) => {
                let (gq, gk) = head_grads(&mut feature_grads, h);
                hybrid_head_backward(
                    q,
                    k,
                    v,
                    &features.query[h],
                    &features.key[h],
                    partition.softmax_indices(),
                    partition.linear_indices(),
                    mode,
                    c,
                    &dy_h,
                    gq,
                    gk,
                )?
            }
            _ => return Err(Error::Argument("attention cache does not match kernel".into())),
        };
        grads.q.push(dq);
        grads.k.push(dk);
        grads.v.push(dv);
    }
    Ok(grads)
}

fn head_grads<'g>(
    grads: &'g mut Option<&mut FeatureMapPair>,
    h: usize,
) -> (Option<&'g mut FeatureMap>, Option<&'g mut FeatureMap>) {
    match grads {
        Some(g) => {
            let FeatureMapPair { query, key } = &mut **g;
            (Some(&mut query[h]), Some(&mut key[h]))
        }
        None => (None, None),
    }
}

fn softmax_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = q.matmul_nt(k)?.scale(scale);
    let probs = row_softmax_stabilized(&scores);
    let y = probs.matmul(v)?;
    Ok((y, probs))
}

fn softmax_head_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dp = dy.matmul_nt(v)?;
    let mut ds = probs.clone();
    for i in 0..ds.rows() {
        let r = dot(probs.row(i), dp.row(i));
        let dp_row = dp.row(i);
        for (s, d) in ds.row_mut(i).iter_mut().zip(dp_row) {
            *s *= (d - r) * scale;
        }
    }
    let dq = ds.matmul(k)?;
    let dk = ds.matmul_tn(q)?;
    let dv = probs.matmul_tn(dy)?;
    Ok((dq, dk, dv))
}

#[allow(clippy::too_many_arguments)]
fn hybrid_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi_q: &FeatureMap,
    phi_k: &FeatureMap,
    softmax_idx: &[usize],
    linear_idx: &[usize],
    mode: HybridMode,
) -> Result<(Tensor, HybridHeadCache)> {
    let (n, m) = (q.rows(), v.cols());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let linear = if linear_idx.is_empty() {
        None
    } else {
        let (phi_q_out, phi_q_cache) = phi_q.forward_cached(q)?;
        let (phi_k_out, phi_k_cache) = phi_k.forward_cached(&k.select_rows(linear_idx))?;
        let kv = phi_k_out.matmul_tn(&v.select_rows(linear_idx))?;
        let ksum = phi_k_out.column_sums();
        Some(LinearPart {
            phi_q: phi_q_out,
            phi_q_cache,
            phi_k: phi_k_out,
            phi_k_cache,
            kv,
            ksum,
        })
    };

    let s = softmax_idx.len();
    let mut weights = vec![0.0; n * s];
    let mut argmax = vec![0; n];
    let mut gain = vec![1.0; n];
    let mut den_raw = vec![0.0; n];
    let mut den = vec![0.0; n];
    let mut y = Tensor::zeros(&[n, m]);
    let mut num = vec![0.0; m];
    for i in 0..n {
        num.iter_mut().for_each(|x| *x = 0.0);
        let mut total = 0.0;
        let mut stabilizer = 0.0;
        if s > 0 {
            let qi = q.row(i);
            let w_row = &mut weights[i * s..(i + 1) * s];
            let mut best = f64::NEG_INFINITY;
            for (jj, &j) in softmax_idx.iter().enumerate() {
                let e = dot(qi, k.row(j)) * scale;
                w_row[jj] = e;
                if e > best {
                    best = e;
                    argmax[i] = jj;
                }
            }
            stabilizer = best;
            for (jj, &j) in softmax_idx.iter().enumerate() {
                let w = (w_row[jj] - stabilizer).exp();
                w_row[jj] = w;
                total += w;
                for (o, vv) in num.iter_mut().zip(v.row(j)) {
                    *o += w * vv;
                }
            }
        }
        if let Some(lp) = &linear {
            let g = match mode {
                HybridMode::Literal => 1.0,
                HybridMode::Consistent => (-stabilizer).exp(),
            };
            gain[i] = g;
            let fq = lp.phi_q.row(i);
            for (p, &f) in fq.iter().enumerate() {
                let gf = g * f;
                for (o, kv) in num.iter_mut().zip(lp.kv.row(p)) {
                    *o += gf * kv;
                }
            }
            total += g * dot(fq, &lp.ksum);
        }
        den_raw[i] = total;
        let d = total.max(DENOMINATOR_GUARD);
        den[i] = d;
        for (o, x) in y.row_mut(i).iter_mut().zip(&num) {
            *o = x / d;
        }
    }
    Ok((
        y.clone(),
        HybridHeadCache {
            linear,
            weights,
            argmax,
            gain,
            den_raw,
            den,
            y,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn hybrid_head_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi_q: &FeatureMap,
    phi_k: &FeatureMap,
    softmax_idx: &[usize],
    linear_idx: &[usize],
    mode: HybridMode,
    cache: &HybridHeadCache,
    dy: &Tensor,
    grads_q: Option<&mut FeatureMap>,
    grads_k: Option<&mut FeatureMap>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d, m) = (q.rows(), q.cols(), v.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let s = softmax_idx.len();
    let feat = cache.linear.as_ref().map_or(0, |lp| lp.kv.rows());

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, m]);
    let mut dphi_q = Tensor::zeros(&[n, feat]);
    let mut dkv = Tensor::zeros(&[feat, m]);
    let mut dksum = vec![0.0; feat];
    let mut dnum = vec![0.0; m];
    let mut t = vec![0.0; feat];
    let mut ds_row = vec![0.0; s];

    for i in 0..n {
        let den = cache.den[i];
        let dy_i = dy.row(i);
        for (o, g) in dnum.iter_mut().zip(dy_i) {
            *o = g / den;
        }
        let dden = if cache.den_raw[i] > DENOMINATOR_GUARD {
            -dot(dy_i, cache.y.row(i)) / den
        } else {
            0.0
        };
        // Gradient w.r.t. the stabilizer cᵢ, routed to the arg-max score.
        let mut dc = 0.0;

        if let Some(lp) = &cache.linear {
            let g = cache.gain[i];
            let fq = lp.phi_q.row(i);
            for (p, tp) in t.iter_mut().enumerate() {
                *tp = dot(lp.kv.row(p), &dnum);
            }
            let dfq = dphi_q.row_mut(i);
            for p in 0..feat {
                dfq[p] = g * (t[p] + lp.ksum[p] * dden);
                let gf = g * fq[p];
                for (o, dn) in dkv.row_mut(p).iter_mut().zip(&dnum) {
                    *o += gf * dn;
                }
                dksum[p] += gf * dden;
            }
            if mode == HybridMode::Consistent && s > 0 {
                let dg = dot(fq, &t) + dot(fq, &lp.ksum) * dden;
                dc -= g * dg;
            }
        }

        if s > 0 {
            let w_row = &cache.weights[i * s..(i + 1) * s];
            for (jj, &j) in softmax_idx.iter().enumerate() {
                let w = w_row[jj];
                let dw = dot(&dnum, v.row(j)) + dden;
                ds_row[jj] = w * dw;
                dc -= w * dw;
                for (o, dn) in dv.row_mut(j).iter_mut().zip(&dnum) {
                    *o += w * dn;
                }
            }
            ds_row[cache.argmax[i]] += dc;
            let qi = q.row(i).to_vec();
            for (jj, &j) in softmax_idx.iter().enumerate() {
                let ds = ds_row[jj] * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = k.row(j).to_vec();
                for (o, kk) in dq.row_mut(i).iter_mut().zip(&kj) {
                    *o += ds * kk;
                }
                for (o, qq) in dk.row_mut(j).iter_mut().zip(&qi) {
                    *o += ds * qq;
                }
            }
        }
    }

    if let Some(lp) = &cache.linear {
        let mut dphi_k = Tensor::zeros(&[linear_idx.len(), feat]);
        for (jj, &j) in linear_idx.iter().enumerate() {
            let vj = v.row(j);
            let fk = lp.phi_k.row(jj).to_vec();
            let row = dphi_k.row_mut(jj);
            for p in 0..feat {
                row[p] = dot(dkv.row(p), vj) + dksum[p];
            }
            let dv_j = dv.row_mut(j);
            for (p, f) in fk.iter().enumerate() {
                for (o, g) in dv_j.iter_mut().zip(dkv.row(p)) {
                    *o += f * g;
                }
            }
        }
        let mut scratch_q;
        let gq = match grads_q {
            Some(g) => g,
            None => {
                scratch_q = phi_q.clone();
                &mut scratch_q
            }
        };
        let dq_phi = phi_q.backward(&lp.phi_q_cache, &dphi_q, gq)?;
        dq.add_assign(&dq_phi)?;
        let mut scratch_k;
        let gk = match grads_k {
            Some(g) => g,
            None => {
                scratch_k = phi_k.clone();
                &mut scratch_k
            }
        };
        let dk_phi = phi_k.backward(&lp.phi_k_cache, &dphi_k, gk)?;
        for (jj, &j) in linear_idx.iter().enumerate() {
            for (o, g) in dk.row_mut(j).iter_mut().zip(dk_phi.row(jj)) {
                *o += g;
            }
        }
    }
    Ok((dq, dk, dv))
}
