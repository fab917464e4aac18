//! Pre-norm transformer blocks with fusion-based s×s patch merging.

use crate::config::{FusionConfig, PyramidConfig};
use crate::error::{Error, Result};
use crate::fusion::{fusion_param_count, Fusion};
use crate::init::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

/// Side and width of every pyramid level: `(n_p / s^b, d · s^b)`.
pub fn pyramid_geometry(n_p: usize, blocks: usize, s: usize, d: usize) -> Result<Vec<(usize, usize)>> {
    if blocks == 0 || s < 2 {
        return Err(Error::Geometry(format!("need ≥1 block and merge factor ≥2, got {blocks}, {s}")));
    }
    let shrink = s.pow(blocks as u32 - 1);
    if n_p % shrink != 0 {
        return Err(Error::Geometry(format!(
            "n_p={n_p} not divisible by {s}^{}",
            blocks - 1
        )));
    }
    Ok((0..blocks)
        .map(|b| (n_p / s.pow(b as u32), d * s.pow(b as u32)))
        .collect())
}

/// One pre-norm encoder layer: `x += MHSA(LN x); x += MLP(LN x)`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub eps: f64,
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

fn linear_params<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(ParamId, ParamId)> {
    Ok((
        init.weight(store, &format!("{prefix}.w"), fan_in, fan_out)?,
        init.constant(store, &format!("{prefix}.b"), &[fan_out], 0.0)?,
    ))
}

fn norm_params<F: Real>(store: &mut ParamStore<F>, init: &mut Init, prefix: &str, dim: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        init.constant(store, &format!("{prefix}.gamma"), &[dim], 1.0)?,
        init.constant(store, &format!("{prefix}.beta"), &[dim], 0.0)?,
    ))
}

pub fn layer_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    4 * dim + 4 * (dim * dim + dim) + dim * hidden + hidden + hidden * dim + dim
}

impl EncoderLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{prefix}: width {dim} not divisible by {heads} heads")));
        }
        let hidden = dim * mlp_ratio;
        Ok(Self {
            dim,
            heads,
            hidden,
            eps,
            ln1: norm_params(store, init, &format!("{prefix}.ln1"), dim)?,
            q: linear_params(store, init, &format!("{prefix}.attn.q"), dim, dim)?,
            k: linear_params(store, init, &format!("{prefix}.attn.k"), dim, dim)?,
            v: linear_params(store, init, &format!("{prefix}.attn.v"), dim, dim)?,
            o: linear_params(store, init, &format!("{prefix}.attn.o"), dim, dim)?,
            ln2: norm_params(store, init, &format!("{prefix}.ln2"), dim)?,
            fc1: linear_params(store, init, &format!("{prefix}.mlp.fc1"), dim, hidden)?,
            fc2: linear_params(store, init, &format!("{prefix}.mlp.fc2"), hidden, dim)?,
        })
    }

    fn lin<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let w = g.param(store, p.0);
        let b = g.param(store, p.1);
        g.linear(x, w, Some(b))
    }

    fn norm<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let gamma = g.param(store, p.0);
        let beta = g.param(store, p.1);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    /// Multi-head self-attention over `(B, L, dim)`.
    pub fn attention<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let mut split = |p| -> Result<Var> {
            let y = Self::lin(g, store, x, p)?;
            let y = g.reshape(y, &[b, l, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, l, dh])
        };
        let q = split(self.q)?;
        let k = split(self.k)?;
        let v = split(self.v)?;
        let att = g.bmm_t(q, k)?;
        let att = g.scale(att, 1.0 / (dh as f64).sqrt())?;
        let att = g.softmax(att, 1.0)?;
        let y = g.bmm(att, v)?;
        let y = g.reshape(y, &[b, h, l, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, l, self.dim])?;
        Self::lin(g, store, y, self.o)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("transformer_block", shape, &[self.dim]));
        }
        let n = self.norm(g, store, x, self.ln1)?;
        let a = self.attention(g, store, n)?;
        let x = g.add(x, a)?;
        let n = self.norm(g, store, x, self.ln2)?;
        let m = Self::lin(g, store, n, self.fc1)?;
        let m = g.gelu(m)?;
        let m = Self::lin(g, store, m, self.fc2)?;
        g.add(x, m)
    }
}

/// `N_l` stacked layers at one pyramid level.
pub fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    layers: &[EncoderLayer],
    mut x: Var,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(g, store, x)?;
    }
    Ok(x)
}

/// Fuse every spatially contiguous `s×s` group of a `(B, side², dim)` grid.
/// Returns the merged `(B, (side/s)², d_out)` grid and the group scores
/// `(B, (side/s)², heads, s²)`.
pub fn patch_merge<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    fusion: &Fusion,
    grid: Var,
    side: usize,
    s: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 3 || shape[1] != side * side {
        return Err(Error::shape("patch_merge", &shape, &[side * side]));
    }
    if s == 0 || side % s != 0 {
        return Err(Error::Geometry(format!("grid side {side} not divisible by merge factor {s}")));
    }
    let (b, dim, m) = (shape[0], shape[2], side / s);
    let x = g.reshape(grid, &[b, m, s, m, s, dim])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[b, m * m, s * s, dim])?;
    let out = fusion.forward(g, store, x)?;
    Ok((out.fused, out.scores))
}

/// Activation grids of every level, recorded before that level's merge.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `grids[b]` is `(B, side_b², dim_b)`.
    pub grids: Vec<Var>,
    pub sides: Vec<usize>,
    pub dims: Vec<usize>,
    pub merge_scores: Vec<Var>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        *self.grids.last().expect("pyramid has at least one level")
    }
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub n_p: usize,
    pub merge_factor: usize,
    pub levels: Vec<(usize, usize)>,
    pub pos: ParamId,
    pub blocks: Vec<Vec<EncoderLayer>>,
    pub merges: Vec<Fusion>,
}

impl Pyramid {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        n_p: usize,
        d: usize,
        cfg: &PyramidConfig,
        eps: f64,
    ) -> Result<Self> {
        let levels = pyramid_geometry(n_p, cfg.blocks, cfg.merge_factor, d)?;
        let pos = init.normal(store, "pyramid.pos", &[n_p * n_p, d], 0.02)?;
        let merge_cfg = FusionConfig {
            query_dim: cfg.merge_query_dim,
            heads: cfg.merge_heads,
            bias: false,
        };
        let mut blocks = Vec::new();
        let mut merges = Vec::new();
        for (b, &(_, dim)) in levels.iter().enumerate() {
            let layers = (0..cfg.layers_per_block)
                .map(|l| {
                    EncoderLayer::new(
                        store,
                        init,
                        &format!("pyramid.block{b}.layer{l}"),
                        dim,
                        cfg.heads,
                        cfg.mlp_ratio,
                        eps,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(layers);
            if b + 1 < levels.len() {
                merges.push(Fusion::new(
                    store,
                    init,
                    &format!("pyramid.merge{b}"),
                    dim,
                    dim * cfg.merge_factor,
                    &merge_cfg,
                )?);
            }
        }
        Ok(Self {
            n_p,
            merge_factor: cfg.merge_factor,
            levels,
            pos,
            blocks,
            merges,
        })
    }

    /// Closed-form parameter count for a configuration.
    pub fn analytic_count(n_p: usize, d: usize, cfg: &PyramidConfig) -> Result<usize> {
        let levels = pyramid_geometry(n_p, cfg.blocks, cfg.merge_factor, d)?;
        let mut n = n_p * n_p * d;
        for (b, &(_, dim)) in levels.iter().enumerate() {
            n += cfg.layers_per_block * layer_param_count(dim, cfg.mlp_ratio);
            if b + 1 < levels.len() {
                n += fusion_param_count(dim, dim * cfg.merge_factor, cfg.merge_query_dim, cfg.merge_heads, false);
            }
        }
        Ok(n)
    }

    /// `(B, n_p², d)` fused tokens to the feature pyramid. The positional
    /// embedding is added once, before the first block.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: Var) -> Result<FeaturePyramid> {
        let pos = g.param(store, self.pos);
        let mut x = g.add_bcast(tokens, pos)?;
        let mut grids = Vec::new();
        let mut merge_scores = Vec::new();
        for (b, layers) in self.blocks.iter().enumerate() {
            x = transformer_block(g, store, layers, x)?;
            grids.push(x);
            if let Some(merge) = self.merges.get(b) {
                let (y, s) = patch_merge(g, store, merge, x, self.levels[b].0, self.merge_factor)?;
                x = y;
                merge_scores.push(s);
            }
        }
        Ok(FeaturePyramid {
            grids,
            sides: self.levels.iter().map(|l| l.0).collect(),
            dims: self.levels.iter().map(|l| l.1).collect(),
            merge_scores,
        })
    }
}
