//! Full encoder and the pretraining model built from a [`Config`].

use crate::config::Config;
use crate::error::Result;
use crate::fusion::{fusion_param_count, Fusion};
use crate::init::Init;
use crate::input::{BandProjector, InputModule, PatchBatch};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::swav::{ProjectionHead, Prototypes};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Band projection, band fusion and the transformer pyramid.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub input: InputModule,
    pub fusion: Fusion,
    pub pyramid: Pyramid,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(n, n_p², n_B, d)` band tokens.
    pub tokens: Var,
    /// `(n, n_p², h, n_B)` band attention scores.
    pub band_scores: Var,
    /// `(n, n_p², d)` fused tokens.
    pub fused: Var,
    pub pyramid: FeaturePyramid,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let input = InputModule::new(store, init, cfg.geometry(), cfg.data.band_specs(), m.d, m.band_budget)?;
        let fusion = Fusion::new(store, init, "fusion", m.d, m.d, &m.fusion)?;
        let pyramid = Pyramid::new(store, init, m.n_p, m.d, &m.pyramid, m.ln_eps)?;
        Ok(Self { input, fusion, pyramid })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, batch: &PatchBatch<F>) -> Result<EncoderOutput> {
        let tokens = self.input.assemble(g, store, batch)?;
        let f = self.fusion.forward(g, store, tokens)?;
        let pyramid = self.pyramid.forward(g, store, f.fused)?;
        Ok(EncoderOutput {
            tokens,
            band_scores: f.scores,
            fused: f.fused,
            pyramid,
        })
    }
}

/// Encoder plus projection head and prototype bank.
#[derive(Debug, Clone)]
pub struct SwavModel {
    pub encoder: Encoder,
    pub head: ProjectionHead,
    pub prototypes: Prototypes,
}

impl SwavModel {
    /// Parameters are registered in a fixed order from `model.init_seed`,
    /// so two builds of one config are bitwise identical.
    pub fn build<F: Real>(cfg: &Config) -> Result<(ParamStore<F>, Self)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg)?;
        Ok((store, model))
    }

    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.model.init_seed);
        let encoder = Encoder::new(store, &mut init, cfg)?;
        let deepest = *encoder.pyramid.levels.last().expect("validated pyramid");
        let head = ProjectionHead::new(store, &mut init, deepest.1, cfg.model.embed_dim)?;
        let prototypes = Prototypes::new(store, &mut init, cfg.swav.prototypes, cfg.model.embed_dim)?;
        Ok(Self {
            encoder,
            head,
            prototypes,
        })
    }

    /// Unit embeddings `(n, d_e)` plus the encoder intermediates.
    pub fn embed<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, batch: &PatchBatch<F>) -> Result<(Var, EncoderOutput)> {
        let out = self.encoder.forward(g, store, batch)?;
        let z = self.head.forward(g, store, out.pyramid.deepest())?;
        Ok((z, out))
    }
}

/// Parameter prefixes of the pretraining model, in registration order.
pub const MODULE_PREFIXES: [(&str, &str); 5] = [
    ("input", "input."),
    ("fusion", "fusion."),
    ("pyramid", "pyramid."),
    ("head", "head."),
    ("prototypes", "prototypes"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    pub analytic: usize,
    /// Count over the built parameter store, when one was built.
    pub enumerated: Option<usize>,
}

/// Closed-form counts for every module of the pretraining model.
pub fn analytic_counts(cfg: &Config) -> Result<Vec<ModuleCount>> {
    cfg.validate()?;
    let m = &cfg.model;
    let geom = cfg.geometry();
    let mut input = 0;
    for b in cfg.data.band_specs() {
        let in_dim = geom.in_dim(&b)?;
        let hidden = crate::input::hidden_dim_for_band(in_dim, m.d, m.band_budget);
        input += BandProjector::count(in_dim, hidden, m.d);
    }
    let fusion = fusion_param_count(m.d, m.d, m.fusion.query_dim, m.fusion.heads, m.fusion.bias);
    let pyramid = Pyramid::analytic_count(m.n_p, m.d, &m.pyramid)?;
    let deepest = m.d * m.pyramid.merge_factor.pow(m.pyramid.blocks as u32 - 1);
    let head = ProjectionHead::analytic_count(deepest, m.embed_dim);
    let protos = cfg.swav.prototypes * m.embed_dim;
    Ok([input, fusion, pyramid, head, protos]
        .iter()
        .zip(MODULE_PREFIXES)
        .map(|(&n, (name, _))| ModuleCount {
            module: name.to_string(),
            analytic: n,
            enumerated: None,
        })
        .collect())
}

/// Analytic counts, plus enumerated counts from a freshly built model when
/// `enumerate` is set.
pub fn count_params(cfg: &Config, enumerate: bool) -> Result<Vec<ModuleCount>> {
    let mut counts = analytic_counts(cfg)?;
    if enumerate {
        let (store, _) = SwavModel::build::<f32>(cfg)?;
        for (c, (_, prefix)) in counts.iter_mut().zip(MODULE_PREFIXES) {
            c.enumerated = Some(store.count_prefix(prefix));
        }
    }
    Ok(counts)
}
