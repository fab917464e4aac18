//! Feature-pyramid segmentation decoder and binary segmentation metrics.

use crate::config::FpnConfig;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

const NORM_EPS: f64 = 1e-5;

/// One 3×3 convolution stage after a ×2 nearest upsample.
#[derive(Debug, Clone)]
pub struct FpnStage {
    /// Side after upsampling.
    pub side: usize,
    /// Pyramid level concatenated at this side, if any.
    pub lateral: Option<usize>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: ParamId,
    pub b: ParamId,
}

/// Decoder over a feature pyramid with levels `(side, dim)`, shallowest
/// first.
#[derive(Debug, Clone)]
pub struct FpnDecoder {
    pub levels: Vec<(usize, usize)>,
    pub output_side: usize,
    pub lateral_width: usize,
    /// Layer norm of each level ahead of its lateral: trained encoder
    /// grids are residual streams whose scale grows with depth.
    pub norms: Vec<(ParamId, ParamId)>,
    pub laterals: Vec<(ParamId, ParamId)>,
    pub stages: Vec<FpnStage>,
    pub out: (ParamId, ParamId),
}

impl FpnDecoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        levels: &[(usize, usize)],
        cfg: &FpnConfig,
        prior: f64,
    ) -> Result<Self> {
        let deepest = levels.last().ok_or_else(|| Error::Config("empty feature pyramid".into()))?.0;
        let mut side = deepest;
        let mut n_up = 0;
        while side < cfg.output_side {
            side *= 2;
            n_up += 1;
        }
        if side != cfg.output_side || cfg.lateral_width == 0 {
            return Err(Error::Config(format!(
                "fpn output side {} not reachable by doubling from {deepest}",
                cfg.output_side
            )));
        }
        let w = cfg.lateral_width;
        let norms = levels
            .iter()
            .enumerate()
            .map(|(i, &(_, dim))| {
                Ok((
                    init.constant(store, &format!("fpn.norm{i}.g"), &[dim], 1.0)?,
                    init.constant(store, &format!("fpn.norm{i}.b"), &[dim], 0.0)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let laterals = levels
            .iter()
            .enumerate()
            .map(|(i, &(_, dim))| {
                Ok((
                    init.weight(store, &format!("fpn.lateral{i}.w"), dim, w)?,
                    init.constant(store, &format!("fpn.lateral{i}.b"), &[w], 0.0)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stages = Vec::new();
        let mut ch = w;
        let mut side = deepest;
        let mut out_ch = w;
        for t in 0..n_up {
            side *= 2;
            let lateral = levels.iter().position(|l| l.0 == side);
            let in_ch = ch + if lateral.is_some() { w } else { 0 };
            if lateral.is_none() {
                out_ch = (out_ch / 2).max(cfg.min_width.max(1));
            }
            stages.push(FpnStage {
                side,
                lateral,
                in_ch,
                out_ch,
                w: init.weight(store, &format!("fpn.stage{t}.w"), 9 * in_ch, out_ch)?,
                b: init.constant(store, &format!("fpn.stage{t}.b"), &[out_ch], 0.0)?,
            });
            ch = out_ch;
        }
        // Output bias starts at the logit of the expected foreground share.
        let p = prior.clamp(1e-3, 1.0 - 1e-3);
        let out = (
            init.weight(store, "fpn.out.w", ch, 1)?,
            init.constant(store, "fpn.out.b", &[1], (p / (1.0 - p)).ln())?,
        );
        Ok(Self {
            levels: levels.to_vec(),
            output_side: cfg.output_side,
            lateral_width: w,
            norms,
            laterals,
            stages,
            out,
        })
    }

    pub fn param_count(&self) -> usize {
        let w = self.lateral_width;
        let lat: usize = self.levels.iter().map(|&(_, d)| 2 * d + d * w + w).sum();
        let st: usize = self.stages.iter().map(|s| 9 * s.in_ch * s.out_ch + s.out_ch).sum();
        let last = self.stages.last().map_or(w, |s| s.out_ch);
        lat + st + last + 1
    }

    fn lateral<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, grids: &[Var], i: usize) -> Result<Var> {
        let (gain, bias) = self.norms[i];
        let (gain, bias) = (g.param(store, gain), g.param(store, bias));
        let x = g.layer_norm(grids[i], gain, bias, NORM_EPS)?;
        let (w, b) = self.laterals[i];
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, Some(b))
    }

    /// Per-pixel logits `(B, side²)` from pyramid grids `(B, side_b², dim_b)`.
    pub fn logits<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, grids: &[Var]) -> Result<Var> {
        if grids.len() != self.levels.len() {
            return Err(Error::Data(format!(
                "decoder built for {} pyramid levels, got {}",
                self.levels.len(),
                grids.len()
            )));
        }
        for (v, &(side, dim)) in grids.iter().zip(&self.levels) {
            let s = g.shape(*v);
            if s.len() != 3 || s[1] != side * side || s[2] != dim {
                return Err(Error::shape("fpn_forward", s, &[side * side, dim]));
            }
        }
        let deepest = self.levels.len() - 1;
        let mut x = self.lateral(g, store, grids, deepest)?;
        let mut side = self.levels[deepest].0;
        for st in &self.stages {
            x = g.upsample2x(x, side, side)?;
            side = st.side;
            if let Some(i) = st.lateral {
                let lat = self.lateral(g, store, grids, i)?;
                x = g.concat(&[x, lat])?;
            }
            let cols = g.im2col3x3(x, side, side)?;
            let (w, b) = (g.param(store, st.w), g.param(store, st.b));
            x = g.linear(cols, w, Some(b))?;
            x = g.gelu(x)?;
        }
        let (w, b) = (g.param(store, self.out.0), g.param(store, self.out.1));
        let y = g.linear(x, w, Some(b))?;
        let b = g.shape(y)[0];
        g.reshape(y, &[b, side * side])
    }

    /// Probability map `(B, side²)`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, grids: &[Var]) -> Result<Var> {
        let z = self.logits(g, store, grids)?;
        g.sigmoid(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

/// Metrics of one map binarized at `threshold` (`p > threshold` is
/// foreground). A class absent from both prediction and target scores 1.
pub fn iou_metrics(prob: &[f32], target: &[f32], threshold: f64) -> Result<SegMetrics> {
    if prob.len() != target.len() {
        return Err(Error::shape("iou_metrics", &[prob.len()], &[target.len()]));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in prob.iter().zip(target) {
        match ((p as f64) > threshold, t > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let iou = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(SegMetrics {
        accuracy: if prob.is_empty() { 1.0 } else { (tp + tn) as f64 / prob.len() as f64 },
        fg_iou: iou(tp, tp + fp + fn_),
        bg_iou: iou(tn, tn + fp + fn_),
    })
}

/// Mean of per-map metrics.
pub fn mean_metrics(all: &[SegMetrics]) -> SegMetrics {
    let n = all.len().max(1) as f64;
    SegMetrics {
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / n,
        fg_iou: all.iter().map(|m| m.fg_iou).sum::<f64>() / n,
        bg_iou: all.iter().map(|m| m.bg_iou).sum::<f64>() / n,
    }
}
