//! Native-resolution patchify, per-band projections and empty tokens.

use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Square area of view split into `n_p × n_p` patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    pub aov_m: f64,
    pub n_p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub modality: usize,
    pub modality_name: String,
    pub band_id: u16,
    pub name: String,
    pub resolution_m: f64,
}

impl GeometryConfig {
    /// Pixel side `aov / r` of a band; must be a whole multiple of `n_p`.
    pub fn band_side(&self, band: &BandSpec) -> Result<usize> {
        let exact = self.aov_m / band.resolution_m;
        let side = exact.round();
        if !(band.resolution_m > 0.0) || side < 1.0 || (exact - side).abs() > 1e-9 * exact.max(1.0) {
            return Err(Error::Geometry(format!(
                "band {} at {} m does not tile a {} m AOV",
                band.name, band.resolution_m, self.aov_m
            )));
        }
        let side = side as usize;
        if self.n_p == 0 || side % self.n_p != 0 {
            return Err(Error::Geometry(format!(
                "band {} side {side} not divisible by n_p={}",
                band.name, self.n_p
            )));
        }
        Ok(side)
    }

    /// Flattened patch length `(side / n_p)²`.
    pub fn in_dim(&self, band: &BandSpec) -> Result<usize> {
        let ps = self.band_side(band)? / self.n_p;
        Ok(ps * ps)
    }

    pub fn n_patches(&self) -> usize {
        self.n_p * self.n_p
    }

    pub fn validate(&self, bands: &[BandSpec]) -> Result<()> {
        if bands.is_empty() {
            return Err(Error::Geometry("no bands configured".into()));
        }
        for b in bands {
            self.band_side(b)?;
        }
        Ok(())
    }
}

/// Split a `side × side` row-major image into `n_p²` flattened blocks.
/// Patches are ordered row-major over the patch grid, pixels row-major
/// within a patch.
pub fn patchify_band<F: Real>(image: &[F], side: usize, n_p: usize) -> Result<Tensor<F>> {
    let mut out = Vec::new();
    patchify_into(image, side, n_p, &mut out)?;
    let ps = side / n_p;
    Tensor::new([n_p * n_p, ps * ps], out)
}

fn patchify_into<F: Real>(image: &[F], side: usize, n_p: usize, out: &mut Vec<F>) -> Result<()> {
    if n_p == 0 || side % n_p != 0 {
        return Err(Error::Geometry(format!("image side {side} not divisible by n_p={n_p}")));
    }
    if image.len() != side * side {
        return Err(Error::shape("patchify_band", &[image.len()], &[side, side]));
    }
    let ps = side / n_p;
    out.reserve(side * side);
    for u in 0..n_p {
        for v in 0..n_p {
            for y in 0..ps {
                let start = (u * ps + y) * side + v * ps;
                out.extend_from_slice(&image[start..start + ps]);
            }
        }
    }
    Ok(())
}

/// Hidden width giving a band's two projections about `budget` weights
/// in total, whatever its patch length.
pub fn hidden_dim_for_band(in_dim: usize, d: usize, budget: usize) -> usize {
    let r = (budget as f64 / (in_dim + d) as f64).round() as usize;
    r.max(1)
}

/// Two stacked linear maps `in_dim → hidden → d` plus the band's empty
/// token. There is no nonlinearity between the maps.
#[derive(Debug, Clone)]
pub struct BandProjector {
    pub in_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub empty: ParamId,
}

impl BandProjector {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            in_dim,
            hidden,
            d,
            w1: init.weight(store, &format!("{prefix}.w1"), in_dim, hidden)?,
            b1: init.constant(store, &format!("{prefix}.b1"), &[hidden], 0.0)?,
            w2: init.weight(store, &format!("{prefix}.w2"), hidden, d)?,
            b2: init.constant(store, &format!("{prefix}.b2"), &[d], 0.0)?,
            empty: init.normal(store, &format!("{prefix}.empty"), &[d], 0.02)?,
        })
    }

    /// Weight count `in_dim·hidden + hidden·d`, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.in_dim * self.hidden + self.hidden * self.d
    }

    pub fn param_count(&self) -> usize {
        Self::count(self.in_dim, self.hidden, self.d)
    }

    /// Weights, both biases and the empty token.
    pub fn count(in_dim: usize, hidden: usize, d: usize) -> usize {
        in_dim * hidden + hidden * d + hidden + 2 * d
    }

    /// `(..., in_dim)` patches to `(..., d)` tokens.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, patches: Var) -> Result<Var> {
        if g.shape(patches).last() != Some(&self.in_dim) {
            return Err(Error::shape("project_band", g.shape(patches), &[self.in_dim]));
        }
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(patches, w1, Some(b1))?;
        g.linear(h, w2, Some(b2))
    }
}

/// Per-band patch tensors for a batch of views. Only kept bands are
/// patchified; dropped ones are represented by their row indices alone.
#[derive(Debug, Clone)]
pub struct PatchBatch<F: Real> {
    pub n: usize,
    pub bands: Vec<BandPatches<F>>,
}

#[derive(Debug, Clone)]
pub struct BandPatches<F: Real> {
    /// Sorted view indices where the band is present.
    pub kept: Vec<usize>,
    /// `(kept.len(), n_p², in_dim)`, absent when no view keeps the band.
    pub patches: Option<Tensor<F>>,
}

/// Input stage: one projector per configured band.
#[derive(Debug, Clone)]
pub struct InputModule {
    pub geometry: GeometryConfig,
    pub bands: Vec<BandSpec>,
    pub sides: Vec<usize>,
    pub projectors: Vec<BandProjector>,
    pub d: usize,
}

impl InputModule {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        geometry: GeometryConfig,
        bands: Vec<BandSpec>,
        d: usize,
        budget: usize,
    ) -> Result<Self> {
        geometry.validate(&bands)?;
        let mut sides = Vec::new();
        let mut projectors = Vec::new();
        for (i, b) in bands.iter().enumerate() {
            sides.push(geometry.band_side(b)?);
            let in_dim = geometry.in_dim(b)?;
            let hidden = hidden_dim_for_band(in_dim, d, budget);
            projectors.push(BandProjector::new(store, init, &format!("input.band{i}"), in_dim, hidden, d)?);
        }
        Ok(Self {
            geometry,
            bands,
            sides,
            projectors,
            d,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn param_count(&self) -> usize {
        self.projectors.iter().map(BandProjector::param_count).sum()
    }

    /// Patchify a batch of views. `views[v][b]` is band `b` of view `v`
    /// (row-major, `side_b²` values); `dropped[v][b]` marks bands replaced
    /// by the empty token, whose pixels are never read.
    pub fn patch_batch<F: Real>(&self, views: &[Vec<Option<&[F]>>], dropped: &[Vec<bool>]) -> Result<PatchBatch<F>> {
        if views.len() != dropped.len() {
            return Err(Error::Usage(format!(
                "{} views but {} drop masks",
                views.len(),
                dropped.len()
            )));
        }
        let nb = self.n_bands();
        for (v, (imgs, mask)) in views.iter().zip(dropped).enumerate() {
            if imgs.len() != nb || mask.len() != nb {
                return Err(Error::Data(format!(
                    "view {v}: expected {nb} bands and mask entries, got {} and {}",
                    imgs.len(),
                    mask.len()
                )));
            }
        }
        let mut bands = Vec::with_capacity(nb);
        for b in 0..nb {
            let side = self.sides[b];
            let in_dim = self.projectors[b].in_dim;
            let mut kept = Vec::new();
            let mut buf = Vec::new();
            for (v, imgs) in views.iter().enumerate() {
                if dropped[v][b] {
                    continue;
                }
                let img = imgs[b].ok_or_else(|| {
                    Error::Data(format!("view {v}: band {} missing and not dropped", self.bands[b].name))
                })?;
                if img.len() != side * side {
                    return Err(Error::Geometry(format!(
                        "band {} expects {side}×{side} pixels, got {}",
                        self.bands[b].name,
                        img.len()
                    )));
                }
                patchify_into(img, side, self.geometry.n_p, &mut buf)?;
                kept.push(v);
            }
            let patches = if kept.is_empty() {
                None
            } else {
                Some(Tensor::new([kept.len(), self.geometry.n_patches(), in_dim], buf)?)
            };
            bands.push(BandPatches { kept, patches });
        }
        Ok(PatchBatch { n: views.len(), bands })
    }

    /// Token tensor `(n, n_p², n_B, d)` with empty tokens at dropped bands.
    pub fn assemble<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, batch: &PatchBatch<F>) -> Result<Var> {
        if batch.bands.len() != self.n_bands() {
            return Err(Error::Data(format!(
                "patch batch has {} bands, model expects {}",
                batch.bands.len(),
                self.n_bands()
            )));
        }
        let np2 = self.geometry.n_patches();
        let mut per_band = Vec::with_capacity(self.n_bands());
        for (proj, bp) in self.projectors.iter().zip(&batch.bands) {
            let empty = g.param(store, proj.empty);
            let kept = match &bp.patches {
                Some(p) => {
                    let x = g.input(p.clone());
                    let t = proj.project(g, store, x)?;
                    Some(t)
                }
                None => None,
            };
            per_band.push(g.fill_rows(kept, &bp.kept, empty, batch.n, &[np2, self.d])?);
        }
        g.stack(&per_band, 2)
    }
}
