//! Diagnostic artifacts: embedding similarity matrices, fusion attention
//! winners, feature maps, prototype alignment strips and view drop masks.
//!
//! Images are binary PGM (gray) and PPM (color). Every image comes with a
//! CSV of the raw values it was rendered from.

use std::fmt::Write as _;
use std::path::Path;

use crate::augment::View;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::input::{BandSpec, PatchBatch};
use crate::model::SwavModel;
use crate::swav::sinkhorn;
use crate::tensor::{softmax, Graph, ParamStore, Tensor};

pub type Rgb = [u8; 3];

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("encode_pgm", &[pixels.len()], &[width * height]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[Rgb]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("encode_ppm", &[pixels.len()], &[width * height]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Value range used to map data onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
}

impl Scale {
    pub fn of(values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi.is_finite() {
            Self { lo, hi }
        } else {
            Self { lo: 0.0, hi: 0.0 }
        }
    }

    /// A zero-width range maps everything to mid-gray.
    pub fn degenerate(&self) -> bool {
        !(self.hi > self.lo)
    }

    pub fn level(&self, v: f64) -> u8 {
        if self.degenerate() {
            return 128;
        }
        ((v - self.lo) / (self.hi - self.lo) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Black to red ramp.
pub fn heat(level: u8) -> Rgb {
    [level, (level as u16 * level as u16 / 1020) as u8, 0]
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// One color per band: evenly spaced hue per modality, brightness
/// stepping down across the bands of a modality.
pub fn band_palette(bands: &[BandSpec]) -> Vec<Rgb> {
    let n_mod = bands.iter().map(|b| b.modality + 1).max().unwrap_or(0);
    bands
        .iter()
        .map(|b| {
            let members: Vec<&BandSpec> = bands.iter().filter(|o| o.modality == b.modality).collect();
            let rank = members.iter().position(|o| o.name == b.name).unwrap_or(0);
            let v = 1.0 - 0.6 * rank as f64 / members.len().max(1) as f64;
            hsv(360.0 * b.modality as f64 / n_mod as f64, 0.85, v)
        })
        .collect()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Cosine similarity and L2 distance between the global embedding of
/// sample `i` (rows) and the local embedding of sample `j` (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub n: usize,
    pub sigma: Vec<f64>,
    pub d2: Vec<f64>,
}

pub fn similarity_matrix(global: &Tensor<f32>, local: &Tensor<f32>) -> Result<SimilarityReport> {
    if global.rank() != 2 || global.shape() != local.shape() {
        return Err(Error::shape("similarity_matrix", global.shape(), local.shape()));
    }
    let n = global.shape()[0];
    let mut sigma = Vec::with_capacity(n * n);
    let mut d2 = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = global.row(i);
        let na = a.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        for j in 0..n {
            let b = local.row(j);
            let nb = b.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let dist: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
            sigma.push(if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 });
            d2.push(dist.sqrt());
        }
    }
    Ok(SimilarityReport { n, sigma, d2 })
}

impl SimilarityReport {
    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.n + j]
    }

    pub fn diag_mean(&self) -> f64 {
        (0..self.n).map(|i| self.sigma_at(i, i)).sum::<f64>() / self.n.max(1) as f64
    }

    pub fn offdiag_mean(&self) -> f64 {
        let pairs = self.n * self.n.saturating_sub(1);
        if pairs == 0 {
            return 0.0;
        }
        let total: f64 = self.sigma.iter().sum::<f64>() - (0..self.n).map(|i| self.sigma_at(i, i)).sum::<f64>();
        total / pairs as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("global,local,sigma,d2\n");
        for i in 0..self.n {
            for j in 0..self.n {
                let k = i * self.n + j;
                let _ = writeln!(s, "{i},{j},{:.8},{:.8}", self.sigma[k], self.d2[k]);
            }
        }
        s
    }

    /// Heatmaps over fixed ranges: σ over [−1, 1], d₂ over [0, 2].
    pub fn export(&self, dir: &Path) -> Result<()> {
        let sig = Scale { lo: -1.0, hi: 1.0 };
        let dist = Scale { lo: 0.0, hi: 2.0 };
        let img = |vals: &[f64], sc: Scale| vals.iter().map(|&v| heat(sc.level(v))).collect::<Vec<_>>();
        write_file(&dir.join("similarity_sigma.ppm"), &encode_ppm(self.n, self.n, &img(&self.sigma, sig))?)?;
        write_file(&dir.join("similarity_d2.ppm"), &encode_ppm(self.n, self.n, &img(&self.d2, dist))?)?;
        write_file(&dir.join("similarity.csv"), self.to_csv().as_bytes())?;
        let note = format!(
            "rows: global view of sample i; columns: local view of sample j\n\
             colour ramp black (low) to red (high)\n\
             similarity_sigma.ppm: sigma from {} to {}\n\
             similarity_d2.ppm: d2 from {} to {}\n\
             diagonal mean sigma {:.6}, off-diagonal mean sigma {:.6}\n",
            sig.lo,
            sig.hi,
            dist.lo,
            dist.hi,
            self.diag_mean(),
            self.offdiag_mean()
        );
        write_file(&dir.join("similarity_scale.txt"), note.as_bytes())
    }
}

/// Patch batch of whole samples with the given drop masks.
pub fn sample_batch(model: &SwavModel, bands: &[&[Vec<f32>]], dropped: &[Vec<bool>]) -> Result<PatchBatch<f32>> {
    let imgs: Vec<Vec<Option<&[f32]>>> = bands
        .iter()
        .zip(dropped)
        .map(|(s, d)| s.iter().zip(d).map(|(b, &x)| (!x).then_some(b.as_slice())).collect())
        .collect();
    model.encoder.input.patch_batch(&imgs, dropped)
}

/// Embeddings of view `view` of each sample's view set, `(n, d_e)`.
pub fn embed_view(model: &SwavModel, store: &ParamStore<f32>, views: &[Vec<View>], view: usize) -> Result<Tensor<f32>> {
    let imgs: Vec<_> = views.iter().map(|v| v[view].band_refs()).collect();
    let masks: Vec<_> = views.iter().map(|v| v[view].dropped.clone()).collect();
    let batch = model.encoder.input.patch_batch(&imgs, &masks)?;
    let mut g = Graph::new();
    let (z, _) = model.embed(&mut g, store, &batch)?;
    Ok(g.value(z).clone())
}

/// Index of the largest score per `(position, head)` of a
/// `(positions, heads, bands)` score tensor; `winners[h][p]`.
pub fn attention_winners(scores: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
    if scores.rank() != 3 {
        return Err(Error::shape("attention_winners", scores.shape(), &[0, 0, 0]));
    }
    let (np, h, nb) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let mut out = vec![vec![0; np]; h];
    for p in 0..np {
        for (head, w) in out.iter_mut().enumerate() {
            let row = &scores.data()[(p * h + head) * nb..(p * h + head + 1) * nb];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            w[p] = best;
        }
    }
    Ok(out)
}

/// Fusion scores `(n_p², heads, bands)` of one sample under `dropped`.
pub fn fusion_scores(model: &SwavModel, store: &ParamStore<f32>, bands: &[Vec<f32>], dropped: &[bool]) -> Result<Tensor<f32>> {
    let batch = sample_batch(model, &[bands], &[dropped.to_vec()])?;
    let mut g = Graph::new();
    let out = model.encoder.forward(&mut g, store, &batch)?;
    Ok(g.value(out.band_scores).index0(0))
}

/// One PPM per head coloured by the winning band, plus the raw scores.
pub fn export_attention_maps(
    scores: &Tensor<f32>,
    n_p: usize,
    bands: &[BandSpec],
    dropped: &[bool],
    dir: &Path,
) -> Result<usize> {
    if scores.rank() != 3 || scores.shape()[0] != n_p * n_p || scores.shape()[2] != bands.len() || dropped.len() != bands.len() {
        return Err(Error::Geometry(format!(
            "attention scores {:?} do not match {n_p}×{n_p} patches and {} bands",
            scores.shape(),
            bands.len()
        )));
    }
    let palette = band_palette(bands);
    let winners = attention_winners(scores)?;
    for (h, w) in winners.iter().enumerate() {
        let px: Vec<Rgb> = w.iter().map(|&b| palette[b]).collect();
        write_file(&dir.join(format!("attention_head{h}.ppm")), &encode_ppm(n_p, n_p, &px)?)?;
    }
    let (heads, nb) = (scores.shape()[1], scores.shape()[2]);
    let mut csv = String::from("row,col,head,band,score,winner\n");
    for p in 0..n_p * n_p {
        for h in 0..heads {
            for b in 0..nb {
                let v = scores.data()[(p * heads + h) * nb + b];
                let _ = writeln!(csv, "{},{},{h},{b},{v:.8},{}", p / n_p, p % n_p, u8::from(winners[h][p] == b));
            }
        }
    }
    write_file(&dir.join("attention_scores.csv"), csv.as_bytes())?;
    let mut legend = String::from("band,modality,name,dropped,r,g,b\n");
    for (i, (b, c)) in bands.iter().zip(&palette).enumerate() {
        let _ = writeln!(
            legend,
            "{i},{},{},{},{},{},{}",
            csv_escape(&b.modality_name),
            csv_escape(&b.name),
            u8::from(dropped[i]),
            c[0],
            c[1],
            c[2]
        );
    }
    write_file(&dir.join("attention_palette.csv"), legend.as_bytes())?;
    Ok(winners.len())
}

/// One pyramid level of one sample: `side²` rows of `dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMap {
    pub side: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LevelMap {
    /// Mean over the feature axis per position.
    pub fn averaged(&self) -> Vec<f64> {
        self.values
            .chunks(self.dim)
            .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / self.dim as f64)
            .collect()
    }

    pub fn feature(&self, k: usize) -> Vec<f64> {
        self.values.chunks(self.dim).map(|r| r[k] as f64).collect()
    }
}

pub fn pyramid_maps(model: &SwavModel, store: &ParamStore<f32>, bands: &[Vec<f32>], dropped: &[bool]) -> Result<Vec<LevelMap>> {
    let batch = sample_batch(model, &[bands], &[dropped.to_vec()])?;
    let mut g = Graph::new();
    let out = model.encoder.forward(&mut g, store, &batch)?;
    let p = &out.pyramid;
    Ok(p.grids
        .iter()
        .zip(p.sides.iter().zip(&p.dims))
        .map(|(&v, (&side, &dim))| LevelMap {
            side,
            dim,
            values: g.value(v).index0(0).into_data(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// One image per pyramid level, averaged over features.
    Averaged,
    /// One image per feature of the first level.
    All,
}

/// Gray map plus its raw values, min-max scaled. Returns the scale.
fn export_gray(dir: &Path, stem: &str, side: usize, values: &[f64], csv: &mut String) -> Result<Scale> {
    let sc = Scale::of(values);
    let px: Vec<u8> = values.iter().map(|&v| sc.level(v)).collect();
    write_file(&dir.join(format!("{stem}.pgm")), &encode_pgm(side, side, &px)?)?;
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(csv, "{stem},{},{},{v:.8}", i / side, i % side);
    }
    Ok(sc)
}

pub fn export_feature_maps(levels: &[LevelMap], mode: FeatureMode, dir: &Path) -> Result<usize> {
    let mut values = String::from("image,row,col,value\n");
    let mut scales = String::from("image,lo,hi,degenerate\n");
    let maps: Vec<(String, usize, Vec<f64>)> = match mode {
        FeatureMode::Averaged => levels
            .iter()
            .enumerate()
            .map(|(b, l)| (format!("block{b}_mean"), l.side, l.averaged()))
            .collect(),
        FeatureMode::All => {
            let l = levels.first().ok_or_else(|| Error::Data("no pyramid levels".into()))?;
            (0..l.dim).map(|k| (format!("block0_feature{k:03}"), l.side, l.feature(k))).collect()
        }
    };
    for (stem, side, v) in &maps {
        let sc = export_gray(dir, stem, *side, v, &mut values)?;
        let _ = writeln!(scales, "{stem},{:.8},{:.8},{}", sc.lo, sc.hi, u8::from(sc.degenerate()));
    }
    let tag = match mode {
        FeatureMode::Averaged => "averaged",
        FeatureMode::All => "all",
    };
    write_file(&dir.join(format!("features_{tag}.csv")), values.as_bytes())?;
    write_file(&dir.join(format!("features_{tag}_scale.csv")), scales.as_bytes())?;
    Ok(maps.len())
}

/// Prototype masses per sample: `q` from Sinkhorn over the batch's global
/// views, `p` the softmax prediction from a local view.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub q: Tensor<f32>,
    pub p: Tensor<f32>,
}

pub fn prototype_alignment(
    global: &Tensor<f32>,
    local: &Tensor<f32>,
    prototypes: &Tensor<f32>,
    cfg: &Config,
) -> Result<Alignment> {
    let sg = global.matmul_t(prototypes)?;
    let sl = local.matmul_t(prototypes)?;
    Ok(Alignment {
        q: sinkhorn(&sg, cfg.swav.epsilon, cfg.swav.sinkhorn_iters)?,
        p: softmax(&sl, 1, cfg.swav.temperature)?,
    })
}

/// Strip image per sample: `q` on top, `p` below, each `band` pixels tall,
/// one column per prototype; intensity is mass over the strip's maximum.
pub fn export_alignment(al: &Alignment, dir: &Path) -> Result<usize> {
    if al.q.shape() != al.p.shape() || al.q.rank() != 2 {
        return Err(Error::shape("export_alignment", al.q.shape(), al.p.shape()));
    }
    const BAND: usize = 8;
    let (n, k) = (al.q.shape()[0], al.q.shape()[1]);
    let mut csv = String::from("sample,row,prototype,mass\n");
    for i in 0..n {
        let rows = [("q", al.q.row(i)), ("p", al.p.row(i))];
        let max = rows.iter().flat_map(|r| r.1).fold(0.0f32, |a, &v| a.max(v)) as f64;
        let sc = Scale { lo: 0.0, hi: max };
        let mut px = Vec::with_capacity(2 * BAND * k);
        for (tag, r) in rows {
            for _ in 0..BAND {
                px.extend(r.iter().map(|&v| sc.level(v as f64)));
            }
            for (j, v) in r.iter().enumerate() {
                let _ = writeln!(csv, "{i},{tag},{j},{v:.8}");
            }
        }
        write_file(&dir.join(format!("prototypes_sample{i}.pgm")), &encode_pgm(k, 2 * BAND, &px)?)?;
    }
    write_file(&dir.join("prototypes.csv"), csv.as_bytes())?;
    Ok(n)
}

/// Drop-mask strip of one sample's views: a row per view, a column per
/// band, kept bands in their palette color and dropped ones black.
pub fn export_views(views: &[View], bands: &[BandSpec], dir: &Path, stem: &str) -> Result<()> {
    const CELL: usize = 8;
    let palette = band_palette(bands);
    let (w, h) = (bands.len() * CELL, views.len() * CELL);
    let mut px = vec![[0u8; 3]; w * h];
    let mut csv = String::from("view,kind,band,dropped\n");
    for (v, view) in views.iter().enumerate() {
        if view.dropped.len() != bands.len() {
            return Err(Error::Data(format!("view {v} has {} mask entries", view.dropped.len())));
        }
        for (b, &d) in view.dropped.iter().enumerate() {
            let _ = writeln!(csv, "{v},{:?},{b},{}", view.kind, u8::from(d));
            if d {
                continue;
            }
            for y in v * CELL..(v + 1) * CELL {
                for x in b * CELL..(b + 1) * CELL {
                    px[y * w + x] = palette[b];
                }
            }
        }
    }
    write_file(&dir.join(format!("{stem}.ppm")), &encode_ppm(w, h, &px)?)?;
    write_file(&dir.join(format!("{stem}.csv")), csv.as_bytes())
}

/// Probability map as PGM (0 → black, 1 → white) plus CSV.
pub fn export_probability_map(prob: &[f32], side: usize, dir: &Path, stem: &str) -> Result<()> {
    let sc = Scale { lo: 0.0, hi: 1.0 };
    let px: Vec<u8> = prob.iter().map(|&v| sc.level(v as f64)).collect();
    write_file(&dir.join(format!("{stem}.pgm")), &encode_pgm(side, side, &px)?)?;
    let mut csv = String::from("row,col,probability\n");
    for (i, v) in prob.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{v:.8}", i / side, i % side);
    }
    write_file(&dir.join(format!("{stem}.csv")), csv.as_bytes())
}
