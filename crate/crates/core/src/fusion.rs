//! Learned-query cross-attention that collapses one token axis.
//!
//! Attention logits for head `a` are `q_a · (x W^K)_a / √d_h`. Because the
//! query is shared by every position, `W^K q` is folded into a
//! `(d_in, h)` matrix first, and the value projection is applied after
//! mixing the raw tokens: `Σ_i w_i (x_i W^V) = (Σ_i w_i x_i) W^V`.

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Fusion {
    pub d_in: usize,
    pub d_out: usize,
    pub query_dim: usize,
    pub heads: usize,
    pub query: ParamId,
    pub w_key: ParamId,
    /// `(d_in, heads·d_out)`, head-major columns.
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub b_value: Option<ParamId>,
    pub b_out: Option<ParamId>,
}

pub struct FusionOutput {
    /// `(..., d_out)`.
    pub fused: Var,
    /// `(..., heads, n)` attention weights over the fused axis.
    pub scores: Var,
}

/// Analytic parameter count of one fusion instance.
pub fn fusion_param_count(d_in: usize, d_out: usize, query_dim: usize, heads: usize, bias: bool) -> usize {
    let d_v = d_out;
    let mut n = d_in * query_dim + d_in * heads * d_v + heads * d_v * d_out + query_dim;
    if bias {
        n += heads * d_v + d_out;
    }
    n
}

impl Fusion {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let (query_dim, heads) = (cfg.query_dim, cfg.heads);
        if heads == 0 || query_dim % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: query_dim {query_dim} not divisible by heads {heads}"
            )));
        }
        let hv = heads * d_out;
        let b_value = if cfg.bias {
            Some(init.constant(store, &format!("{prefix}.b_value"), &[hv], 0.0)?)
        } else {
            None
        };
        let b_out = if cfg.bias {
            Some(init.constant(store, &format!("{prefix}.b_out"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            d_in,
            d_out,
            query_dim,
            heads,
            query: init.normal(store, &format!("{prefix}.query"), &[query_dim], 1.0)?,
            w_key: init.weight(store, &format!("{prefix}.w_key"), d_in, query_dim)?,
            w_value: init.weight(store, &format!("{prefix}.w_value"), d_in, hv)?,
            w_out: init.weight(store, &format!("{prefix}.w_out"), hv, d_out)?,
            b_value,
            b_out,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.query_dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        fusion_param_count(self.d_in, self.d_out, self.query_dim, self.heads, self.b_value.is_some())
    }

    /// Fuse `(..., n, d_in)` tokens into `(..., d_out)`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: Var) -> Result<FusionOutput> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d_in {
            return Err(Error::shape("fuse", &shape, &[self.d_in]));
        }
        let n = shape[shape.len() - 2];
        if n == 0 {
            return Err(Error::Usage("fuse over an empty token axis".into()));
        }
        let lead = &shape[..shape.len() - 2];
        let rows: usize = lead.iter().product();
        let (h, dh, dv) = (self.heads, self.head_dim(), self.d_out);

        // u[:, a] = W^K_a q_a
        let q = g.param(store, self.query);
        let q = g.reshape(q, &[h, dh])?;
        let wk = g.param(store, self.w_key);
        let wk = g.reshape(wk, &[self.d_in, h, dh])?;
        let u = g.mul_bcast(wk, q)?;
        let u = g.sum_last(u)?;

        let x = g.reshape(tokens, &[rows, n, self.d_in])?;
        let logits = g.matmul(x, u)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let logits = g.permute(logits, &[0, 2, 1])?;
        let scores = g.softmax(logits, 1.0)?;

        // Mixed raw tokens per head, then the per-head value projection.
        let mixed = g.bmm(scores, x)?;
        let mixed = g.permute(mixed, &[1, 0, 2])?;
        let wv = g.param(store, self.w_value);
        let wv = g.reshape(wv, &[self.d_in, h, dv])?;
        let wv = g.permute(wv, &[1, 0, 2])?;
        let heads = g.bmm(mixed, wv)?;
        let heads = g.permute(heads, &[1, 0, 2])?;
        let mut concat = g.reshape(heads, &[rows, h * dv])?;
        if let Some(b) = self.b_value {
            let b = g.param(store, b);
            concat = g.add_bcast(concat, b)?;
        }
        let wo = g.param(store, self.w_out);
        let bo = self.b_out.map(|b| g.param(store, b));
        let fused = g.linear(concat, wo, bo)?;

        let mut out_shape = lead.to_vec();
        out_shape.push(self.d_out);
        let fused = g.reshape(fused, &out_shape)?;
        let mut score_shape = lead.to_vec();
        score_shape.extend([h, n]);
        let scores = g.reshape(scores, &score_shape)?;
        Ok(FusionOutput { fused, scores })
    }
}

/// Winning token index per (row, head) of a `(..., heads, n)` score
/// tensor; ties go to the lowest index. Output shape is `(..., heads)`
/// flattened row-major.
pub fn argmax_band_map<F: Real>(scores: &Tensor<F>) -> Vec<usize> {
    let n = scores.last_dim();
    scores
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
