//! Swapped-assignment objective: projection head, prototypes, Sinkhorn
//! codes, embedding queue and collapse monitors.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Mean-pool over positions, then `dim → 2·d_e → d_e` with GELU, then
/// unit L2 norm.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub d_in: usize,
    pub hidden: usize,
    pub d_e: usize,
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl ProjectionHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, d_in: usize, d_e: usize) -> Result<Self> {
        let hidden = 2 * d_e;
        Ok(Self {
            d_in,
            hidden,
            d_e,
            fc1: (
                init.weight(store, "head.fc1.w", d_in, hidden)?,
                init.constant(store, "head.fc1.b", &[hidden], 0.0)?,
            ),
            fc2: (
                init.weight(store, "head.fc2.w", hidden, d_e)?,
                init.constant(store, "head.fc2.b", &[d_e], 0.0)?,
            ),
        })
    }

    pub fn analytic_count(d_in: usize, d_e: usize) -> usize {
        let h = 2 * d_e;
        d_in * h + h + h * d_e + d_e
    }

    /// `(B, L, d_in)` grid to `(B, d_e)` unit embeddings. A zero vector
    /// before normalization maps to the uniform unit vector.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, grid: Var) -> Result<Var> {
        let shape = g.shape(grid);
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(Error::shape("project_embed", shape, &[self.d_in]));
        }
        let pooled = g.mean_axis(grid, 1)?;
        let (w1, b1) = (g.param(store, self.fc1.0), g.param(store, self.fc1.1));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let (w2, b2) = (g.param(store, self.fc2.0), g.param(store, self.fc2.1));
        let z = g.linear(h, w2, Some(b2))?;
        g.l2_normalize(z)
    }
}

/// Bank of `K` unit-norm prototype rows.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub id: ParamId,
    pub k: usize,
    pub d_e: usize,
}

impl Prototypes {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, k: usize, d_e: usize) -> Result<Self> {
        let id = init.normal(store, "prototypes", &[k, d_e], 1.0)?;
        let p = Self { id, k, d_e };
        p.normalize(store);
        Ok(p)
    }

    /// Rescale every row to unit L2 norm, accumulating in f64.
    pub fn normalize<F: Real>(&self, store: &mut ParamStore<F>) {
        for row in store.value_mut(self.id).data_mut().chunks_mut(self.d_e) {
            let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v = F::of(v.f64() / n);
                }
            }
        }
    }
}

/// `z · Cᵀ`: cosine similarities for unit-norm rows.
pub fn prototype_scores<F: Real>(z: &Tensor<F>, prototypes: &Tensor<F>) -> Result<Tensor<F>> {
    z.matmul_t(prototypes)
}

/// Sinkhorn-Knopp over all `M` rows of `scores`: `exp(scores/ε)` after
/// subtracting each row's maximum, then `iters` rounds of column
/// (prototype) marginals `1/K` followed by row (sample) marginals `1/M`,
/// then each row rescaled to sum to one.
pub fn sinkhorn<F: Real>(scores: &Tensor<F>, epsilon: f64, iters: usize) -> Result<Tensor<F>> {
    if !(epsilon > 0.0) {
        return Err(Error::Param(format!("sinkhorn epsilon must be > 0, got {epsilon}")));
    }
    if scores.rank() != 2 || scores.numel() == 0 {
        return Err(Error::Usage(format!("sinkhorn expects a non-empty (M, K) matrix, got {:?}", scores.shape())));
    }
    let (m, k) = (scores.shape()[0], scores.shape()[1]);
    let mut q: Vec<f64> = Vec::with_capacity(m * k);
    for row in scores.data().chunks(k) {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        q.extend(row.iter().map(|v| ((v.f64() - max) / epsilon).exp()));
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    let mut col = vec![0.0; k];
    for _ in 0..iters {
        col.iter_mut().for_each(|c| *c = 0.0);
        for row in q.chunks(k) {
            for (c, v) in col.iter_mut().zip(row) {
                *c += v;
            }
        }
        for row in q.chunks_mut(k) {
            for (v, c) in row.iter_mut().zip(&col) {
                // An unused prototype column stays zero.
                if *c > 0.0 {
                    *v /= c * k as f64;
                }
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s * m as f64);
        }
    }
    for row in q.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new([m, k], q.into_iter().map(F::of).collect())
}

/// Codes for the current batch. Queue rows only enlarge the marginal
/// computation; their codes are discarded.
pub fn sinkhorn_codes<F: Real>(
    current: &Tensor<F>,
    queue: Option<&Tensor<F>>,
    epsilon: f64,
    iters: usize,
) -> Result<Tensor<F>> {
    let b = current.shape()[0];
    let all = match queue {
        Some(q) if q.numel() > 0 => {
            if q.last_dim() != current.last_dim() {
                return Err(Error::shape("sinkhorn_codes", current.shape(), q.shape()));
            }
            Tensor::new(
                [b + q.shape()[0], current.last_dim()],
                [current.data(), q.data()].concat(),
            )?
        }
        _ => current.clone(),
    };
    let q = sinkhorn(&all, epsilon, iters)?;
    let k = current.last_dim();
    Tensor::new([b, k], q.data()[..b * k].to_vec())
}

/// Cross-entropy weights for the swapped-prediction loss.
///
/// Rows of the score matrix are view-major: row `j·B + b` is view `j` of
/// sample `b`, globals first. Each global view `i` predicts every other
/// view `j ≠ i`; the sum is averaged over samples and the
/// `n_g·(n_views − 1)` contributing pairs.
pub fn swav_targets<F: Real>(codes: &[Tensor<F>], n_views: usize) -> Result<Tensor<F>> {
    let n_g = codes.len();
    if n_g == 0 || n_views <= n_g {
        return Err(Error::Usage(format!("need n_views > n_globals ≥ 1, got {n_views} and {n_g}")));
    }
    let (b, k) = (codes[0].shape()[0], codes[0].last_dim());
    if codes.iter().any(|c| c.shape() != [b, k]) {
        return Err(Error::Usage("global codes differ in shape".into()));
    }
    let norm = (b * n_g * (n_views - 1)) as f64;
    let mut w = vec![0.0f64; n_views * b * k];
    for (i, q) in codes.iter().enumerate() {
        for j in (0..n_views).filter(|&j| j != i) {
            for (t, v) in w[j * b * k..(j + 1) * b * k].iter_mut().zip(q.data()) {
                *t += v.f64() / norm;
            }
        }
    }
    Tensor::new([n_views * b, k], w.into_iter().map(F::of).collect())
}

/// `−Σ targets · log softmax(scores / τ)`; targets are constants, so no
/// gradient reaches the code path.
pub fn swav_loss<F: Real>(g: &mut Graph<F>, scores: Var, targets: Tensor<F>, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be > 0, got {temperature}")));
    }
    let logp = g.log_softmax(scores, temperature)?;
    g.dot_const(logp, targets.map(|v| -v))
}

/// FIFO of past embeddings, one slot per global view.
#[derive(Debug, Clone)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    slots: Vec<VecDeque<Vec<f32>>>,
}

impl EmbeddingQueue {
    pub fn new(slots: usize, capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            slots: vec![VecDeque::new(); slots],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, slot: usize) -> usize {
        self.slots[slot].len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(VecDeque::is_empty)
    }

    /// Append rows of `(n, dim)`, evicting the oldest beyond capacity.
    pub fn push<F: Real>(&mut self, slot: usize, rows: &Tensor<F>) -> Result<()> {
        if rows.last_dim() != self.dim {
            return Err(Error::shape("queue push", rows.shape(), &[self.dim]));
        }
        let q = &mut self.slots[slot];
        for r in rows.data().chunks(self.dim) {
            q.push_back(r.iter().map(|v| v.f64() as f32).collect());
            if q.len() > self.capacity {
                q.pop_front();
            }
        }
        Ok(())
    }

    /// Queue contents oldest first, or `None` when the slot is empty.
    pub fn rows<F: Real>(&self, slot: usize) -> Option<Tensor<F>> {
        let q = &self.slots[slot];
        if q.is_empty() {
            return None;
        }
        let data = q.iter().flatten().map(|&v| F::of(v as f64)).collect();
        Tensor::new([q.len(), self.dim], data).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseStats {
    /// Entropy (nats) of the mean code distribution.
    pub usage_entropy: f64,
    /// Largest single-prototype share of the mean code.
    pub max_fraction: f64,
    /// Entropy of the hard (argmax) assignment histogram.
    pub hard_entropy: f64,
}

/// Accumulates codes over an epoch.
#[derive(Debug, Clone)]
pub struct CollapseMonitor {
    mass: Vec<f64>,
    hard: Vec<u64>,
    rows: u64,
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

impl CollapseMonitor {
    pub fn new(k: usize) -> Self {
        Self {
            mass: vec![0.0; k],
            hard: vec![0; k],
            rows: 0,
        }
    }

    pub fn add<F: Real>(&mut self, codes: &Tensor<F>) {
        let k = self.mass.len();
        for row in codes.data().chunks(k) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                self.mass[i] += v.f64();
                if *v > row[best] {
                    best = i;
                }
            }
            self.hard[best] += 1;
            self.rows += 1;
        }
    }

    pub fn stats(&self) -> CollapseStats {
        let total: f64 = self.mass.iter().sum();
        let n = self.rows.max(1) as f64;
        let total = if total > 0.0 { total } else { 1.0 };
        CollapseStats {
            usage_entropy: entropy(self.mass.iter().map(|m| m / total)),
            max_fraction: self.mass.iter().fold(0.0f64, |a, &m| a.max(m / total)),
            hard_entropy: entropy(self.hard.iter().map(|&c| c as f64 / n)),
        }
    }
}
