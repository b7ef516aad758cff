use crate::error::{Error, Result};
use crate::numerics::{Parameters, SeededRng, Tensor};

/// Query/key/value projections and the output projection back to model width.
///
/// `w_q`, `w_k` are `F × D·H`, `w_v` is `F × M·H` and `w_out` is `M·H × F`.
/// The output projection lets the residual `A(x) + x` type-check when
/// `M·H ≠ F`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    heads: usize,
    head_dim: usize,
    value_dim: usize,
}

impl AttentionWeights {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_out: Tensor,
        heads: usize,
        head_dim: usize,
        value_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || value_dim == 0 {
            return Err(Error::Argument("heads and head dims must be positive".into()));
        }
        let width = w_q.shape().first().copied().unwrap_or(0);
        let expect = |t: &Tensor, name: &str, rows: usize, cols: usize| -> Result<()> {
            if t.shape() != [rows, cols] {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(&w_q, "w_q", width, head_dim * heads)?;
        expect(&w_k, "w_k", width, head_dim * heads)?;
        expect(&w_v, "w_v", width, value_dim * heads)?;
        expect(&w_out, "w_out", value_dim * heads, width)?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
            head_dim,
            value_dim,
        })
    }

    /// Gaussian init with variance `1/fan_in`; `qk_gain` scales the query
    /// and key projections to sharpen the attention pattern.
    pub fn random(
        rng: &mut SeededRng,
        width: usize,
        heads: usize,
        head_dim: usize,
        value_dim: usize,
        qk_gain: f64,
    ) -> Self {
        let fan_in = (width as f64).sqrt();
        let w_q = rng.gaussian(&[width, head_dim * heads]).scale(qk_gain / fan_in);
        let w_k = rng.gaussian(&[width, head_dim * heads]).scale(qk_gain / fan_in);
        let w_v = rng.gaussian(&[width, value_dim * heads]).scale(1.0 / fan_in);
        let w_out = rng
            .gaussian(&[value_dim * heads, width])
            .scale(1.0 / ((value_dim * heads) as f64).sqrt());
        Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
            head_dim,
            value_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl Parameters for AttentionWeights {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_out);
    }
}

/// Per-head queries (`N × D`), keys (`N × D`) and values (`N × M`).
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Qkv {
    pub fn new(q: Vec<Tensor>, k: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        let qkv = Self { q, k, v };
        qkv.validate()?;
        Ok(qkv)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.q.len();
        if h == 0 || self.k.len() != h || self.v.len() != h {
            return Err(Error::Shape(format!(
                "head counts differ: q {}, k {}, v {}",
                self.q.len(),
                self.k.len(),
                self.v.len()
            )));
        }
        let n = self.q[0].rows();
        let d = self.q[0].cols();
        let m = self.v[0].cols();
        for head in 0..h {
            for (name, t, cols) in [
                ("q", &self.q[head], d),
                ("k", &self.k[head], d),
                ("v", &self.v[head], m),
            ] {
                if t.rank() != 2 || t.rows() != n || t.cols() != cols {
                    return Err(Error::Shape(format!(
                        "{name}[{head}] has shape {:?}, expected [{n}, {cols}]",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.q.len()
    }

    pub fn tokens(&self) -> usize {
        self.q[0].rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q[0].cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v[0].cols()
    }
}

/// Linear projections `q = x·w_q`, `k = x·w_k`, `v = x·w_v`, split per head.
pub fn project_qkv(x: &Tensor, w: &AttentionWeights) -> Result<Qkv> {
    if x.rank() != 2 || x.cols() != w.width() {
        return Err(Error::Shape(format!(
            "input of shape {:?} against model width {}",
            x.shape(),
            w.width()
        )));
    }
    let q_all = x.matmul(&w.w_q)?;
    let k_all = x.matmul(&w.w_k)?;
    let v_all = x.matmul(&w.w_v)?;
    let (d, m) = (w.head_dim, w.value_dim);
    let split = |all: &Tensor, width: usize| -> Vec<Tensor> {
        (0..w.heads).map(|h| all.columns(h * width, width)).collect()
    };
    Ok(Qkv {
        q: split(&q_all, d),
        k: split(&k_all, d),
        v: split(&v_all, m),
    })
}

/// Concatenates per-head outputs column-wise (`N × M·H`).
pub fn concat_heads(heads: &[Tensor]) -> Tensor {
    let n = heads[0].rows();
    let m = heads[0].cols();
    let mut out = Tensor::zeros(&[n, m * heads.len()]);
    for (h, t) in heads.iter().enumerate() {
        out.set_columns(h * m, t);
    }
    out
}
