//! Distillation objectives.
//!
//! * value distillation: `mean |y − ŷ|` over all elements;
//! * attention distillation: `log(1 + mean_{h,i,j} (e^{clamp(qᵢ·kⱼ/√D)} − φ_q(qᵢ)·φ_k(kⱼ))²)`
//!   with the exponent clamped to `[−30, 30]`.

use crate::attention::{FeatureMapPair, Qkv};
use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};

pub const EXPONENT_CLAMP: f64 = 30.0;

fn same_shape(y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape(format!(
            "distillation target {:?} vs prediction {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if y.is_empty() {
        return Err(Error::Shape("empty distillation target".into()));
    }
    Ok(())
}

pub fn loss_value_distill(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    same_shape(y, y_hat)?;
    let sum: f64 = y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / y.len() as f64)
}

/// `∂L_vd/∂ŷ`; the subgradient at `ŷ = y` is taken as 0.
pub fn value_distill_grad(y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    same_shape(y, y_hat)?;
    let n = y.len() as f64;
    y_hat.zip_map(y, |p, t| {
        if p > t {
            1.0 / n
        } else if p < t {
            -1.0 / n
        } else {
            0.0
        }
    })
}

fn kernel_target(q: &[f64], k: &[f64], scale: f64) -> f64 {
    (dot(q, k) * scale).clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP).exp()
}

/// `φ_q(qᵢ)·φ_k(kⱼ) − e^{…}` for every pair.
fn residuals(q: &Tensor, k: &Tensor, phi_q: &Tensor, phi_k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() || q.cols() == 0 {
        return Err(Error::Shape(format!("queries {:?} vs keys {:?}", q.shape(), k.shape())));
    }
    if phi_q.rows() != q.rows() || phi_k.rows() != k.rows() || phi_q.cols() != phi_k.cols() {
        return Err(Error::Shape(format!(
            "features {:?}/{:?} against queries {:?} and keys {:?}",
            phi_q.shape(),
            phi_k.shape(),
            q.shape(),
            k.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut r = phi_q.matmul_nt(phi_k)?;
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            let v = r.get(i, j) - kernel_target(q.row(i), k.row(j), scale);
            r.set(i, j, v);
        }
    }
    Ok(r)
}

/// Single-head attention distillation loss on precomputed features.
pub fn loss_attention_distill(q: &Tensor, k: &Tensor, phi_q: &Tensor, phi_k: &Tensor) -> Result<f64> {
    let r = residuals(q, k, phi_q, phi_k)?;
    let mse = r.data().iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
    Ok(mse.ln_1p())
}

/// Multi-head attention distillation loss; accumulates `∂L/∂φ` into `grads`
/// when given.
pub fn attention_distill_loss(
    qkv: &Qkv,
    features: &FeatureMapPair,
    grads: Option<&mut FeatureMapPair>,
) -> Result<f64> {
    qkv.validate()?;
    if features.heads() != qkv.heads() || features.input_dim() != qkv.head_dim() {
        return Err(Error::Shape("feature maps do not match the attention heads".into()));
    }
    let heads = qkv.heads();
    let mut parts = Vec::with_capacity(heads);
    let mut sse = 0.0;
    for h in 0..heads {
        let (phi_q, cq) = features.query[h].forward_cached(&qkv.q[h])?;
        let (phi_k, ck) = features.key[h].forward_cached(&qkv.k[h])?;
        let r = residuals(&qkv.q[h], &qkv.k[h], &phi_q, &phi_k)?;
        sse += r.data().iter().map(|x| x * x).sum::<f64>();
        parts.push((phi_q, cq, phi_k, ck, r));
    }
    let pairs = (qkv.tokens() * qkv.tokens() * heads) as f64;
    let mse = sse / pairs;
    if let Some(g) = grads {
        let coef = 2.0 / (pairs * (1.0 + mse));
        for (h, (phi_q, cq, phi_k, ck, r)) in parts.iter().enumerate() {
            let dphi_q = r.matmul(phi_k)?.scale(coef);
            let dphi_k = r.matmul_tn(phi_q)?.scale(coef);
            features.query[h].backward(cq, &dphi_q, &mut g.query[h])?;
            features.key[h].backward(ck, &dphi_k, &mut g.key[h])?;
        }
    }
    Ok(mse.ln_1p())
}
