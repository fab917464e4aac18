//! Finite-difference checks of whole modules: each returns the relative
//! error of every checked gradient for one seed.

use bandfuse_core::config::{Config, FusionConfig};
use bandfuse_core::fpn::FpnDecoder;
use bandfuse_core::fusion::Fusion;
use bandfuse_core::init::Init;
use bandfuse_core::pyramid::{patch_merge, EncoderLayer};
use bandfuse_core::swav::{swav_loss, ProjectionHead};
use bandfuse_core::tensor::{Graph, ParamStore};
use bandfuse_core::Var;

use super::{check_inputs, check_params, project, randn, rng};

pub type Check = fn(u64) -> Vec<(&'static str, f64)>;

pub const MODULE_CHECKS: &[(&str, Check)] = &[
    ("band fusion", band_fusion),
    ("self-attention and mlp", encoder_layer),
    ("patch merge", merge),
    ("projection head and swav loss", head_and_loss),
    ("fpn decoder with bce", fpn_bce),
];

/// Perturb every parameter so constant-initialized ones (norm gains,
/// biases) are exercised away from their starting values.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0x71);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = randn(&mut r, &shape, 0.3);
        store.value_mut(id).add_assign(&noise).unwrap();
    }
}

pub fn band_fusion(seed: u64) -> Vec<(&'static str, f64)> {
    let cfg = FusionConfig {
        query_dim: 8,
        heads: 2,
        bias: true,
    };
    let mut store = ParamStore::<f64>::new();
    let f = Fusion::new(&mut store, &mut Init::new(seed), "fusion", 4, 3, &cfg).unwrap();
    jitter(&mut store, seed);
    let x = randn(&mut rng(seed), &[2, 3, 5, 4], 1.0);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let out = f.forward(g, s, xv)?;
        project(g, out.fused, seed)
    };
    let wrt_tokens = |g: &mut Graph<f64>, v: &[Var]| {
        let out = f.forward(g, &store, v[0])?;
        let a = project(g, out.fused, seed)?;
        let b = project(g, out.scores, seed + 1)?;
        g.add(a, b)
    };
    vec![
        ("fusion params", check_params(&store, &build)),
        ("fusion tokens", check_inputs(&[x.clone()], &wrt_tokens)),
    ]
}

pub fn encoder_layer(seed: u64) -> Vec<(&'static str, f64)> {
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, &mut Init::new(seed), "layer", 4, 2, 2, 1e-5).unwrap();
    jitter(&mut store, seed);
    let x = randn(&mut rng(seed), &[2, 4, 4], 1.0);
    let attention = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let y = layer.attention(g, s, xv)?;
        project(g, y, seed)
    };
    let whole = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let y = layer.forward(g, s, xv)?;
        project(g, y, seed)
    };
    let wrt_x = |g: &mut Graph<f64>, v: &[Var]| {
        let y = layer.forward(g, &store, v[0])?;
        project(g, y, seed)
    };
    vec![
        ("attention", check_params(&store, &attention)),
        ("layer with mlp", check_params(&store, &whole)),
        ("layer input", check_inputs(&[x.clone()], &wrt_x)),
    ]
}

pub fn merge(seed: u64) -> Vec<(&'static str, f64)> {
    let cfg = FusionConfig {
        query_dim: 4,
        heads: 2,
        bias: true,
    };
    let mut store = ParamStore::<f64>::new();
    let f = Fusion::new(&mut store, &mut Init::new(seed), "merge", 3, 6, &cfg).unwrap();
    jitter(&mut store, seed);
    let x = randn(&mut rng(seed), &[2, 16, 3], 1.0);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let (m, _) = patch_merge(g, &store, &f, v[0], 4, 2)?;
        project(g, m, seed)
    };
    let params = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let (m, _) = patch_merge(g, s, &f, xv, 4, 2)?;
        project(g, m, seed)
    };
    vec![
        ("merge input", check_inputs(&[x.clone()], &build)),
        ("merge params", check_params(&store, &params)),
    ]
}

pub fn head_and_loss(seed: u64) -> Vec<(&'static str, f64)> {
    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut store, &mut Init::new(seed), 6, 4).unwrap();
    let protos = store.add("prototypes", randn(&mut rng(seed + 9), &[5, 4], 1.0)).unwrap();
    jitter(&mut store, seed);
    let x = randn(&mut rng(seed), &[3, 4, 6], 1.0);
    let targets = randn(&mut rng(seed + 3), &[3, 5], 1.0).map(|v| v.abs());
    let head_only = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let z = head.forward(g, s, xv)?;
        project(g, z, seed)
    };
    let ce = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.input(x.clone());
        let z = head.forward(g, s, xv)?;
        let c = g.param(s, protos);
        let scores = g.matmul_t(z, c)?;
        swav_loss(g, scores, targets.clone(), 0.1)
    };
    vec![
        ("projection head", check_params(&store, &head_only)),
        ("swav cross-entropy", check_params(&store, &ce)),
    ]
}

pub fn fpn_bce(seed: u64) -> Vec<(&'static str, f64)> {
    let mut fpn = Config::desk().fpn;
    fpn.output_side = 8;
    fpn.lateral_width = 2;
    fpn.min_width = 1;
    let levels = [(4, 3), (2, 4)];
    let mut store = ParamStore::<f64>::new();
    let dec = FpnDecoder::new(&mut store, &mut Init::new(seed), &levels, &fpn, 0.3).unwrap();
    jitter(&mut store, seed);
    let mut r = rng(seed);
    let g0 = randn(&mut r, &[2, 16, 3], 1.0);
    let g1 = randn(&mut r, &[2, 4, 4], 1.0);
    let target = randn(&mut r, &[2, 64], 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let grids = [g.input(g0.clone()), g.input(g1.clone())];
        let logits = dec.logits(g, s, &grids)?;
        g.bce_with_logits(logits, target.clone())
    };
    let wrt_grids = |g: &mut Graph<f64>, v: &[Var]| {
        let logits = dec.logits(g, &store, v)?;
        g.bce_with_logits(logits, target.clone())
    };
    vec![
        ("fpn + bce params", check_params(&store, &build)),
        ("fpn + bce grids", check_inputs(&[g0.clone(), g1.clone()], &wrt_grids)),
    ]
}
