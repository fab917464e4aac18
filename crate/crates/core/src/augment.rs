//! Global and local views built by band/modality dropping plus noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Per-band drop probability for global views.
    pub global_band_drop: f64,
    pub global_noise_add: f64,
    pub global_noise_mul: f64,
    /// Whole-modality drop probability for local views.
    pub local_modality_drop: f64,
    /// Drop probability for each band that survived the modality draw.
    pub local_band_drop: f64,
    pub local_noise_add: f64,
    pub local_noise_mul: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            global_band_drop: 0.1,
            global_noise_add: 0.01,
            global_noise_mul: 0.01,
            local_modality_drop: 0.5,
            local_band_drop: 0.3,
            local_noise_add: 0.05,
            local_noise_mul: 0.05,
        }
    }
}

impl AugmentPolicy {
    /// No drops and no noise.
    pub fn identity() -> Self {
        Self {
            global_band_drop: 0.0,
            global_noise_add: 0.0,
            global_noise_mul: 0.0,
            local_modality_drop: 0.0,
            local_band_drop: 0.0,
            local_noise_add: 0.0,
            local_noise_mul: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("global_band_drop", self.global_band_drop),
            ("local_modality_drop", self.local_modality_drop),
            ("local_band_drop", self.local_band_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} outside [0, 1]")));
            }
        }
        for (name, s) in [
            ("global_noise_add", self.global_noise_add),
            ("global_noise_mul", self.global_noise_mul),
            ("local_noise_add", self.local_noise_add),
            ("local_noise_mul", self.local_noise_mul),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("augment.{name} = {s} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    fn noise(&self, kind: ViewKind) -> (f64, f64) {
        match kind {
            ViewKind::Global => (self.global_noise_add, self.global_noise_mul),
            ViewKind::Local => (self.local_noise_add, self.local_noise_mul),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

/// RNG for one (seed, epoch, sample, view) cell, independent of the order
/// in which cells are visited.
pub fn view_rng(seed: u64, epoch: u64, sample: u64, view: u64) -> ChaCha8Rng {
    keyed([seed, epoch, sample, view])
}

/// `true` marks a dropped band. `modality_of[b]` is band `b`'s modality.
/// Draws repeat until at least one band survives; global draws also
/// repeat while any modality is dropped entirely.
pub fn band_drop_mask(policy: &AugmentPolicy, kind: ViewKind, modality_of: &[usize], rng: &mut impl Rng) -> Vec<bool> {
    let n_mod = modality_of.iter().max().map_or(0, |m| m + 1);
    let mut mask = vec![false; modality_of.len()];
    if mask.is_empty() {
        return mask;
    }
    // A global draw can only succeed if some band may survive.
    let impossible = match kind {
        ViewKind::Global => policy.global_band_drop >= 1.0,
        ViewKind::Local => policy.local_modality_drop >= 1.0 || policy.local_band_drop >= 1.0,
    };
    if impossible {
        return mask;
    }
    loop {
        match kind {
            ViewKind::Global => {
                for m in mask.iter_mut() {
                    *m = rng.random_bool(policy.global_band_drop);
                }
            }
            ViewKind::Local => {
                let mod_drop: Vec<bool> = (0..n_mod).map(|_| rng.random_bool(policy.local_modality_drop)).collect();
                for (b, m) in mask.iter_mut().enumerate() {
                    *m = mod_drop[modality_of[b]] || rng.random_bool(policy.local_band_drop);
                }
            }
        }
        let any_kept = mask.iter().any(|&d| !d);
        let whole_modality = kind == ViewKind::Global
            && (0..n_mod).any(|m| {
                let mut bands = modality_of.iter().zip(&mask).filter(|(mo, _)| **mo == m);
                bands.all(|(_, &d)| d)
            });
        if any_kept && !whole_modality {
            return mask;
        }
    }
}

/// `x' = x·(1 + η_mul) + η_add` with i.i.d. normal noise per pixel.
pub fn apply_noise(image: &mut [f32], sigma_add: f64, sigma_mul: f64, rng: &mut impl Rng) {
    if sigma_add == 0.0 && sigma_mul == 0.0 {
        return;
    }
    let add = Normal::new(0.0f32, sigma_add as f32).expect("finite sigma");
    let mul = Normal::new(0.0f32, sigma_mul as f32).expect("finite sigma");
    for x in image.iter_mut() {
        let m = mul.sample(rng);
        let a = add.sample(rng);
        *x = *x * (1.0 + m) + a;
    }
}

/// One augmented view: dropped bands carry no pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub kind: ViewKind,
    pub dropped: Vec<bool>,
    pub bands: Vec<Option<Vec<f32>>>,
}

impl View {
    pub fn band_refs(&self) -> Vec<Option<&[f32]>> {
        self.bands.iter().map(|b| b.as_deref()).collect()
    }
}

/// `n_g` global views followed by `n_l` local views of one sample.
/// View `v` draws from `view_rng(seed, epoch, sample, v)`.
#[allow(clippy::too_many_arguments)]
pub fn make_views(
    bands: &[&[f32]],
    modality_of: &[usize],
    policy: &AugmentPolicy,
    n_g: usize,
    n_l: usize,
    seed: u64,
    epoch: u64,
    sample: u64,
) -> Result<Vec<View>> {
    if n_l <= n_g || n_g == 0 {
        return Err(Error::Config(format!("need n_local > n_global ≥ 1, got {n_g} and {n_l}")));
    }
    if bands.len() != modality_of.len() {
        return Err(Error::Data(format!(
            "{} band images for {} configured bands",
            bands.len(),
            modality_of.len()
        )));
    }
    let mut views = Vec::with_capacity(n_g + n_l);
    for v in 0..n_g + n_l {
        let kind = if v < n_g { ViewKind::Global } else { ViewKind::Local };
        let mut rng = view_rng(seed, epoch, sample, v as u64);
        let dropped = band_drop_mask(policy, kind, modality_of, &mut rng);
        let (sa, sm) = policy.noise(kind);
        let imgs = bands
            .iter()
            .zip(&dropped)
            .map(|(img, &d)| {
                (!d).then(|| {
                    let mut x = img.to_vec();
                    apply_noise(&mut x, sa, sm, &mut rng);
                    x
                })
            })
            .collect();
        views.push(View {
            kind,
            dropped,
            bands: imgs,
        });
    }
    Ok(views)
}
