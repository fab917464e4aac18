//! Seeded synthetic scenes: one latent field rendered per band at native
//! resolution, with optional clouds over optical-like modalities and a
//! binary label of high-latent blobs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::container::{Record, RecordKind, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{domain, keyed};

/// Sum of `bumps` Gaussian blobs on a `side × side` grid, min-max scaled
/// to `[0, 1]`. Zero bumps or a flat field give all zeros.
pub fn gen_latent(rng: &mut impl Rng, side: usize, bumps: usize, width_min: f64, width_max: f64) -> Vec<f64> {
    let mut field = vec![0.0f64; side * side];
    for _ in 0..bumps {
        let cy = rng.random_range(0.0..side as f64);
        let cx = rng.random_range(0.0..side as f64);
        let w = rng.random_range(width_min..=width_max) * side as f64;
        let amp = rng.random_range(0.3..1.0);
        let inv = 1.0 / (2.0 * w * w);
        for y in 0..side {
            let dy = y as f64 + 0.5 - cy;
            for x in 0..side {
                let dx = x as f64 + 0.5 - cx;
                field[y * side + x] += amp * (-(dy * dy + dx * dx) * inv).exp();
            }
        }
    }
    min_max(&mut field);
    field
}

fn min_max(field: &mut [f64]) {
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        field.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    field.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
}

/// Mean over `block × block` tiles of a `side × side` grid.
pub fn block_mean(field: &[f64], side: usize, block: usize) -> Result<Vec<f64>> {
    if block == 0 || side % block != 0 || field.len() != side * side {
        return Err(Error::Geometry(format!(
            "cannot block-average a {side}×{side} field by {block}"
        )));
    }
    let out_side = side / block;
    let mut out = vec![0.0; out_side * out_side];
    for y in 0..side {
        for x in 0..side {
            out[(y / block) * out_side + x / block] += field[y * side + x];
        }
    }
    let n = (block * block) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Per-band monotone response `offset + gain · latent^gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandResponse {
    pub gain: f64,
    pub offset: f64,
    pub gamma: f64,
}

impl BandResponse {
    pub const IDENTITY: BandResponse = BandResponse {
        gain: 1.0,
        offset: 0.0,
        gamma: 1.0,
    };

    /// Fixed per band id, independent of the dataset seed, so datasets
    /// generated with different seeds share one sensor model.
    pub fn for_band(band_id: u16) -> Self {
        let mut r = keyed([0, domain::BAND_RESPONSE, band_id as u64, 0]);
        Self {
            gain: r.random_range(0.6..1.4),
            offset: r.random_range(-0.2..0.2),
            gamma: r.random_range(0.7..1.4),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.offset + self.gain * v.max(0.0).powf(self.gamma)
    }
}

/// Render one band: response, optional cloud clamp (on the latent grid),
/// block-mean to native size, then additive sensor noise.
pub fn render_band(
    latent: &[f64],
    latent_side: usize,
    response: BandResponse,
    side: usize,
    clouds: Option<(&[bool], f64)>,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    if side == 0 || latent_side % side != 0 {
        return Err(Error::Geometry(format!(
            "latent side {latent_side} not divisible by band side {side}"
        )));
    }
    let mut v: Vec<f64> = latent.iter().map(|&l| response.apply(l)).collect();
    if let Some((mask, level)) = clouds {
        for (x, &m) in v.iter_mut().zip(mask) {
            if m {
                *x = level;
            }
        }
    }
    let down = block_mean(&v, latent_side, latent_side / side)?;
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    Ok(down
        .into_iter()
        .map(|x| {
            let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (x + n) as f32
        })
        .collect())
}

/// Value at the `q` quantile: the `ceil(q·n)`-th smallest.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[idx]
}

fn box_smooth(field: &[f64], side: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let mut out = vec![0.0; field.len()];
    let r = radius as isize;
    for y in 0..side as isize {
        for x in 0..side as isize {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(side as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(side as isize - 1) {
                    s += field[(yy * side as isize + xx) as usize];
                    n += 1.0;
                }
            }
            out[(y * side as isize + x) as usize] = s / n;
        }
    }
    out
}

/// Positive where the smoothed, downsampled latent exceeds its quantile.
pub fn render_label(latent: &[f64], latent_side: usize, side: usize, q: f64, radius: usize) -> Result<Vec<f32>> {
    if side == 0 || latent_side % side != 0 {
        return Err(Error::Geometry(format!(
            "label side {side} does not divide latent side {latent_side}"
        )));
    }
    let smooth = box_smooth(latent, latent_side, radius);
    let down = block_mean(&smooth, latent_side, latent_side / side)?;
    let t = quantile(&down, q);
    Ok(down.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect())
}

/// Cloud mask covering roughly `coverage` of the grid.
fn cloud_mask(rng: &mut impl Rng, side: usize, bumps: usize, coverage: f64) -> Vec<bool> {
    let field = gen_latent(rng, side, bumps.max(1), 0.08, 0.2);
    let t = quantile(&field, 1.0 - coverage);
    field.iter().map(|&v| v > t).collect()
}

/// Grid side of the finest configured band; the latent lives there.
pub fn latent_side(cfg: &DataConfig) -> Result<usize> {
    let side = cfg.aov_m / cfg.finest_resolution();
    if (side - side.round()).abs() > 1e-9 || side < 1.0 {
        return Err(Error::Geometry(format!(
            "finest resolution {} m does not tile {} m",
            cfg.finest_resolution(),
            cfg.aov_m
        )));
    }
    Ok(side.round() as usize)
}

/// Generate sample `id` of the dataset seeded with `seed`. Everything is
/// drawn from the `(seed, id)` stream, so samples are order-independent.
pub fn generate_sample(cfg: &DataConfig, seed: u64, id: u64) -> Result<SampleRecord> {
    let mut rng = keyed([seed, domain::SAMPLE, id, 0]);
    let ls = latent_side(cfg)?;
    let l = &cfg.latent;
    let latent = gen_latent(&mut rng, ls, l.bumps, l.width_min, l.width_max);
    let oc = &cfg.occlusion;
    let cloudy = rng.random_bool(oc.probability.clamp(0.0, 1.0));
    let mask = cloudy.then(|| cloud_mask(&mut rng, ls, oc.bumps, oc.coverage));
    let mut records = Vec::new();
    for b in cfg.band_specs() {
        let modality = &cfg.modalities[b.modality];
        let side = (cfg.aov_m / b.resolution_m).round() as usize;
        let clouds = match (&mask, modality.occluded) {
            (Some(m), true) => Some((m.as_slice(), oc.level)),
            _ => None,
        };
        let data = render_band(
            &latent,
            ls,
            BandResponse::for_band(b.band_id),
            side,
            clouds,
            modality.noise_std,
            &mut rng,
        )?;
        records.push(Record {
            band_id: b.band_id,
            kind: RecordKind::Band,
            height: side as u32,
            width: side as u32,
            data,
        });
    }
    if cfg.label.enabled {
        let side = cfg.label.side;
        records.push(Record {
            band_id: u16::MAX,
            kind: RecordKind::Label,
            height: side as u32,
            width: side as u32,
            data: render_label(&latent, ls, side, cfg.label.quantile, cfg.label.smooth_radius)?,
        });
    }
    Ok(SampleRecord { sample_id: id, records })
}
