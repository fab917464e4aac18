//! Run configuration: dataset profile, model geometry, SwAV, augmentation,
//! training and fine-tuning settings.
//!
//! A config file is TOML. The optional top-level `profile` key selects a
//! base (`"desk"` or `"paper"`); every other key overrides the matching
//! field of that base, section by section.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::input::{BandSpec, GeometryConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDef {
    pub name: String,
    pub resolution_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    /// Whether cloud-like occlusions are rendered into this modality.
    pub occluded: bool,
    /// Std of additive sensor noise in raw band units.
    pub noise_std: f64,
    pub bands: Vec<BandDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    /// Number of Gaussian bumps summed into the scene field.
    pub bumps: usize,
    /// Bump width range as a fraction of the field side.
    pub width_min: f64,
    pub width_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Probability that a sample carries clouds at all.
    pub probability: f64,
    /// Fraction of the AOV covered when clouds are present.
    pub coverage: f64,
    /// Raw band value inside a cloud.
    pub level: f64,
    pub bumps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub enabled: bool,
    /// Pixels whose smoothed latent exceeds this quantile are positive.
    pub quantile: f64,
    /// Label map side in pixels.
    pub side: usize,
    /// Box-filter radius (in latent pixels) used before thresholding.
    pub smooth_radius: usize,
}

/// Synthetic dataset profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub aov_m: f64,
    pub modalities: Vec<ModalitySpec>,
    pub latent: LatentConfig,
    pub occlusion: OcclusionConfig,
    pub label: LabelConfig,
}

impl DataConfig {
    /// Bands in configuration order; band ids are positions in this list.
    pub fn band_specs(&self) -> Vec<BandSpec> {
        let mut out = Vec::new();
        for (m, modality) in self.modalities.iter().enumerate() {
            for b in &modality.bands {
                out.push(BandSpec {
                    modality: m,
                    modality_name: modality.name.clone(),
                    band_id: out.len() as u16,
                    name: b.name.clone(),
                    resolution_m: b.resolution_m,
                });
            }
        }
        out
    }

    pub fn n_bands(&self) -> usize {
        self.modalities.iter().map(|m| m.bands.len()).sum()
    }

    pub fn finest_resolution(&self) -> f64 {
        self.modalities
            .iter()
            .flat_map(|m| m.bands.iter().map(|b| b.resolution_m))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn coarsest_resolution(&self) -> f64 {
        self.modalities
            .iter()
            .flat_map(|m| m.bands.iter().map(|b| b.resolution_m))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub query_dim: usize,
    pub heads: usize,
    /// Value/output biases. Key biases are omitted: they shift every
    /// token's logit equally and cancel in the softmax.
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub layers_per_block: usize,
    pub blocks: usize,
    pub merge_factor: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub merge_query_dim: usize,
    pub merge_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Patches per side.
    pub n_p: usize,
    /// Token width after the input projections.
    pub d: usize,
    /// Per-band projection parameter budget.
    pub band_budget: usize,
    pub fusion: FusionConfig,
    pub pyramid: PyramidConfig,
    /// Projection-head output width.
    pub embed_dim: usize,
    pub ln_eps: f64,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwavConfig {
    pub prototypes: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    /// Queue capacity in batches, per global-view slot.
    pub queue_batches: usize,
    /// First epoch (0-based) in which the queue feeds Sinkhorn.
    pub queue_start_epoch: usize,
    pub n_global: usize,
    pub n_local: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// `"sgd"` (with `momentum`) or `"adam"`.
    pub optimizer: String,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Prototypes receive no updates for this many initial steps.
    pub freeze_prototypes_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub output_side: usize,
    pub lateral_width: usize,
    /// Channel floor for stages past the shallowest pyramid level, which
    /// halve their width each doubling.
    pub min_width: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub threshold: f64,
    pub batch_size: usize,
    /// Band subsets compared by the ablation harness.
    pub ablations: Vec<Ablation>,
}

/// A named band subset; bands are `modality.band` names, empty keeps all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub name: String,
    pub bands: Vec<String>,
}

impl DataConfig {
    /// Drop mask keeping only the ablation's bands.
    pub fn ablation_mask(&self, ablation: &Ablation) -> Result<Vec<bool>> {
        let specs = self.band_specs();
        if ablation.bands.is_empty() {
            return Ok(vec![false; specs.len()]);
        }
        let keys: Vec<String> = specs.iter().map(|b| format!("{}.{}", b.modality_name, b.name)).collect();
        for want in &ablation.bands {
            if !keys.contains(want) {
                return Err(Error::Config(format!(
                    "ablation `{}` names unknown band `{want}`",
                    ablation.name
                )));
            }
        }
        Ok(keys.iter().map(|k| !ablation.bands.contains(k)).collect())
    }
}

fn ablation(name: &str, bands: &[&str]) -> Ablation {
    Ablation {
        name: name.into(),
        bands: bands.iter().map(|b| b.to_string()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub swav: SwavConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub fpn: FpnConfig,
}

fn band(name: &str, resolution_m: f64) -> BandDef {
    BandDef {
        name: name.into(),
        resolution_m,
    }
}

impl Config {
    /// Small CPU profile: 96 m AOV, seven bands over three modalities.
    pub fn desk() -> Self {
        Config {
            profile: "desk".into(),
            data: DataConfig {
                name: "desk".into(),
                aov_m: 96.0,
                modalities: vec![
                    ModalitySpec {
                        name: "A".into(),
                        occluded: true,
                        noise_std: 0.02,
                        bands: vec![band("A1", 3.0), band("A2", 3.0)],
                    },
                    ModalitySpec {
                        name: "B".into(),
                        occluded: true,
                        noise_std: 0.02,
                        bands: vec![band("B1", 6.0), band("B2", 6.0), band("B3", 6.0), band("B4", 12.0)],
                    },
                    ModalitySpec {
                        name: "C".into(),
                        occluded: false,
                        noise_std: 0.05,
                        bands: vec![band("C1", 12.0)],
                    },
                ],
                latent: LatentConfig {
                    bumps: 10,
                    width_min: 0.04,
                    width_max: 0.15,
                },
                occlusion: OcclusionConfig {
                    probability: 0.8,
                    coverage: 0.4,
                    level: 1.5,
                    bumps: 4,
                },
                label: LabelConfig {
                    enabled: true,
                    quantile: 0.85,
                    side: 32,
                    smooth_radius: 1,
                },
            },
            model: ModelConfig {
                n_p: 8,
                d: 16,
                band_budget: 2000,
                fusion: FusionConfig {
                    query_dim: 32,
                    heads: 4,
                    bias: false,
                },
                pyramid: PyramidConfig {
                    layers_per_block: 1,
                    blocks: 3,
                    merge_factor: 2,
                    heads: 2,
                    mlp_ratio: 4,
                    merge_query_dim: 32,
                    merge_heads: 4,
                },
                embed_dim: 32,
                ln_eps: 1e-5,
                init_seed: 0,
            },
            swav: SwavConfig {
                prototypes: 32,
                temperature: 0.1,
                epsilon: 0.05,
                sinkhorn_iters: 3,
                queue_batches: 4,
                queue_start_epoch: 15,
                n_global: 2,
                n_local: 6,
            },
            augment: AugmentPolicy::default(),
            train: TrainConfig {
                epochs: 30,
                batch_size: 16,
                lr: 1e-3,
                lr_min: 1e-5,
                optimizer: "adam".into(),
                momentum: 0.9,
                grad_clip: 5.0,
                freeze_prototypes_steps: 0,
            },
            fpn: FpnConfig {
                output_side: 32,
                lateral_width: 64,
                min_width: 16,
                stage1_epochs: 20,
                stage2_epochs: 40,
                lr0: 1e-4,
                lr_min: 1e-7,
                threshold: 0.5,
                batch_size: 8,
                ablations: vec![
                    ablation("all", &[]),
                    ablation("B+C", &["B.B1", "B.B2", "B.B3", "B.B4", "C.C1"]),
                    ablation("B-rgb", &["B.B1", "B.B2", "B.B3"]),
                ],
            },
        }
    }

    /// Full-size profile: 960 m AOV, 24 bands over four sensors.
    pub fn paper() -> Self {
        let mut c = Config::desk();
        c.profile = "paper".into();
        c.data = DataConfig {
            name: "paper".into(),
            aov_m: 960.0,
            modalities: vec![
                ModalitySpec {
                    name: "spot".into(),
                    occluded: true,
                    noise_std: 0.02,
                    bands: ["blue", "green", "red", "nir"].iter().map(|n| band(n, 1.5)).collect(),
                },
                ModalitySpec {
                    name: "s1".into(),
                    occluded: false,
                    noise_std: 0.05,
                    bands: vec![band("vv", 10.0), band("vh", 10.0)],
                },
                ModalitySpec {
                    name: "s2".into(),
                    occluded: true,
                    noise_std: 0.02,
                    bands: ["b02", "b03", "b04", "b08"]
                        .iter()
                        .map(|n| band(n, 10.0))
                        .chain(["b05", "b06", "b07", "b8a", "b11", "b12"].iter().map(|n| band(n, 20.0)))
                        .collect(),
                },
                ModalitySpec {
                    name: "l8".into(),
                    occluded: true,
                    noise_std: 0.02,
                    bands: ["b1", "b2", "b3", "b4", "b5", "b6", "b7", "b10"]
                        .iter()
                        .map(|n| band(n, 30.0))
                        .collect(),
                },
            ],
            latent: LatentConfig {
                bumps: 40,
                width_min: 0.02,
                width_max: 0.1,
            },
            occlusion: c.data.occlusion.clone(),
            label: LabelConfig {
                enabled: true,
                quantile: 0.85,
                side: 128,
                smooth_radius: 3,
            },
        };
        c.model = ModelConfig {
            n_p: 16,
            d: 128,
            band_budget: 158_000,
            fusion: FusionConfig {
                query_dim: 4096,
                heads: 8,
                bias: false,
            },
            pyramid: PyramidConfig {
                layers_per_block: 8,
                blocks: 4,
                merge_factor: 2,
                heads: 8,
                mlp_ratio: 2,
                merge_query_dim: 4096,
                merge_heads: 8,
            },
            embed_dim: 128,
            ln_eps: 1e-5,
            init_seed: 0,
        };
        c.swav.prototypes = 512;
        c.train.batch_size = 256;
        c.fpn.output_side = 128;
        c.fpn.stage1_epochs = 50;
        c.fpn.stage2_epochs = 100;
        c.fpn.lateral_width = 128;
        let s2: Vec<String> = ["b02", "b03", "b04", "b08", "b05", "b06", "b07", "b8a", "b11", "b12"]
            .iter()
            .map(|b| format!("s2.{b}"))
            .chain(["s1.vv".to_string(), "s1.vh".to_string()])
            .collect();
        c.fpn.ablations = vec![
            ablation("all", &[]),
            ablation("s2+s1", &s2.iter().map(String::as_str).collect::<Vec<_>>()),
            ablation("s2-rgb", &["s2.b02", "s2.b03", "s2.b04"]),
        ];
        c
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    /// Parse a TOML config, layering it over its base profile.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match overrides.get("profile") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => "desk".into(),
        };
        let base = Config::from_profile(&profile)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, overrides);
        let cfg: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            aov_m: self.data.aov_m,
            n_p: self.model.n_p,
        }
    }

    /// Structural checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry();
        geom.validate(&self.data.band_specs())?;
        let m = &self.model;
        let p = &m.pyramid;
        if m.fusion.heads == 0 || m.fusion.query_dim % m.fusion.heads != 0 {
            return Err(Error::Config(format!(
                "fusion query_dim {} not divisible by heads {}",
                m.fusion.query_dim, m.fusion.heads
            )));
        }
        if p.merge_heads == 0 || p.merge_query_dim % p.merge_heads != 0 {
            return Err(Error::Config("merge query_dim not divisible by merge_heads".into()));
        }
        if p.blocks == 0 || p.merge_factor < 2 {
            return Err(Error::Config("pyramid needs ≥1 block and merge factor ≥2".into()));
        }
        let shrink = p.merge_factor.pow(p.blocks as u32 - 1);
        if m.n_p % shrink != 0 {
            return Err(Error::Geometry(format!(
                "n_p={} not divisible by {}^{}",
                m.n_p,
                p.merge_factor,
                p.blocks - 1
            )));
        }
        for b in 0..p.blocks {
            let dim = m.d * p.merge_factor.pow(b as u32);
            if p.heads == 0 || dim % p.heads != 0 {
                return Err(Error::Config(format!("block {b} width {dim} not divisible by heads {}", p.heads)));
            }
        }
        let s = &self.swav;
        if !(s.temperature > 0.0) || !(s.epsilon > 0.0) {
            return Err(Error::Config("swav temperature and epsilon must be > 0".into()));
        }
        if s.prototypes == 0 {
            return Err(Error::Config("swav needs at least one prototype".into()));
        }
        if s.n_global == 0 || s.n_local <= s.n_global {
            return Err(Error::Config(format!(
                "need n_local > n_global ≥ 1, got n_global={} n_local={}",
                s.n_global, s.n_local
            )));
        }
        self.augment.validate()?;
        if !matches!(self.train.optimizer.as_str(), "sgd" | "adam") {
            return Err(Error::Config(format!(
                "unknown optimizer `{}` (expected sgd or adam)",
                self.train.optimizer
            )));
        }
        let f = &self.fpn;
        for a in &f.ablations {
            if self.data.ablation_mask(a)?.iter().all(|&d| d) {
                return Err(Error::Config(format!("ablation `{}` keeps no band", a.name)));
            }
        }
        let mut side = m.n_p;
        while side < f.output_side {
            side *= 2;
        }
        if side != f.output_side {
            return Err(Error::Config(format!(
                "fpn output_side {} is not n_p={} times a power of two",
                f.output_side, m.n_p
            )));
        }
        if self.data.label.enabled && self.data.label.side != f.output_side {
            return Err(Error::Config(format!(
                "label side {} differs from fpn output_side {}",
                self.data.label.side, f.output_side
            )));
        }
        let latent = self.data.aov_m / self.data.finest_resolution();
        if self.data.label.side == 0 || (latent.round() as usize) % self.data.label.side != 0 {
            return Err(Error::Config(format!(
                "label side {} does not divide the {latent} px latent grid",
                self.data.label.side
            )));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        Config::desk().validate().unwrap();
        Config::paper().validate().unwrap();
        assert_eq!(Config::paper().data.n_bands(), 24);
        assert_eq!(Config::desk().data.n_bands(), 7);
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let c = Config::desk();
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);

        let o = Config::from_toml("profile = \"desk\"\n[train]\nepochs = 3\n[model.fusion]\nheads = 2\n").unwrap();
        assert_eq!(o.train.epochs, 3);
        assert_eq!(o.model.fusion.heads, 2);
        assert_eq!(o.model.fusion.query_dim, 32);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(matches!(Config::from_toml("profile = \"huge\""), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[train]\nepoch = 3"), Err(Error::Config(_))));
        assert!(Config::from_toml("[model]\nn_p = 7").is_err());
        assert!(Config::from_toml("[swav]\nn_local = 2").is_err());
    }

    #[test]
    fn fpn_and_label_sides_checked() {
        assert!(matches!(Config::from_toml("[fpn]\noutput_side = 24"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[data.label]\nside = 16"), Err(Error::Config(_))));
        let p = Config::paper();
        assert_eq!((p.fpn.output_side, p.data.label.side), (128, 128));
    }

    #[test]
    fn ablation_masks() {
        let c = Config::desk();
        let masks: Vec<Vec<bool>> = c.fpn.ablations.iter().map(|a| c.data.ablation_mask(a).unwrap()).collect();
        assert_eq!(masks[0], vec![false; 7]);
        assert_eq!(masks[1], vec![true, true, false, false, false, false, false]);
        assert_eq!(masks[2], vec![true, true, false, false, false, true, true]);
        let p = Config::paper();
        let rgb = p.data.ablation_mask(&p.fpn.ablations[2]).unwrap();
        assert_eq!(rgb.iter().filter(|&&d| !d).count(), 3);
        let bad = Ablation {
            name: "x".into(),
            bands: vec!["B.B9".into()],
        };
        assert!(c.data.ablation_mask(&bad).is_err());
    }
}
