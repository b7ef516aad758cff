//! Conversion of softmax self-attention into hybrid softmax/linear attention.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`numerics`]: dense tensors, seeded randomness, finite-difference checks
//!   and the checkpoint file format.
//! * [`attention`]: softmax, linear and hybrid kernels, the learnable
//!   polynomial feature map, token partitioning and the transformer block.
//! * [`distill`]: per-block distillation of the feature maps against a frozen
//!   teacher and the per-block, per-rate error table.
//! * [`planner`]: the FLOPs cost model, the multiple-choice knapsack rate
//!   selection and reduction reports.
//! * [`toymodel`]: a small denoising transformer used as teacher and student,
//!   synthetic data, training, student assembly and fidelity metrics.

pub mod attention;
pub mod distill;
mod error;
pub mod numerics;
pub mod planner;
pub mod toymodel;

pub use error::{Error, Result};
