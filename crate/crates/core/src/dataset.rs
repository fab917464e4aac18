//! On-disk datasets: one container file per sample plus a TOML manifest
//! holding the generating profile and per-band normalization statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Config, DataConfig};
use crate::container::SampleRecord;
use crate::error::{Error, Result};
use crate::synth::generate_sample;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandStats {
    pub band_id: u16,
    pub modality: String,
    pub name: String,
    pub resolution_m: f64,
    pub side: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub profile: String,
    pub seed: u64,
    pub count: u64,
    pub label_side: Option<usize>,
    pub bands: Vec<BandStats>,
    pub data: DataConfig,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(path.display(), e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                path.display(),
                format!("unsupported manifest version {}", m.format_version),
            ));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn sample_file_name(id: u64) -> String {
    format!("sample_{id:06}.pvfs")
}

/// Running f64 sums per band, accumulated in sample order.
#[derive(Debug, Clone)]
struct Accum {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

/// Generate `count` samples into `out_dir` and write the manifest last.
pub fn gen_dataset(data: &DataConfig, profile: &str, count: u64, seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let specs = data.band_specs();
    let mut acc = vec![
        Accum {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0
        };
        specs.len()
    ];
    for id in 0..count {
        let sample = generate_sample(data, seed, id)?;
        for (a, r) in acc.iter_mut().zip(sample.bands()) {
            for &v in &r.data {
                let v = v as f64;
                a.n += 1.0;
                a.sum += v;
                a.sum_sq += v * v;
            }
        }
        sample.write(&out_dir.join(sample_file_name(id)))?;
    }
    let bands = specs
        .iter()
        .zip(&acc)
        .map(|(b, a)| {
            let (mean, std) = if a.n > 0.0 {
                let mean = a.sum / a.n;
                (mean, (a.sum_sq / a.n - mean * mean).max(0.0).sqrt())
            } else {
                (0.0, 1.0)
            };
            BandStats {
                band_id: b.band_id,
                modality: b.modality_name.clone(),
                name: b.name.clone(),
                resolution_m: b.resolution_m,
                side: (data.aov_m / b.resolution_m).round() as usize,
                mean,
                std,
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        profile: profile.to_string(),
        seed,
        count,
        label_side: data.label.enabled.then_some(data.label.side),
        bands,
        data: data.clone(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A loaded sample with bands normalized by the manifest statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub bands: Vec<Vec<f32>>,
    pub label: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn path(&self, id: u64) -> PathBuf {
        self.dir.join(sample_file_name(id))
    }

    pub fn load_raw(&self, id: u64) -> Result<SampleRecord> {
        SampleRecord::read(&self.path(id))
    }

    pub fn load(&self, id: u64) -> Result<Sample> {
        let path = self.path(id);
        let rec = SampleRecord::read(&path)?;
        self.normalize(rec, &path)
    }

    /// Geometry error when the dataset's bands or footprint differ from
    /// what `cfg` describes.
    pub fn check_compatible(&self, cfg: &Config) -> Result<()> {
        let d = &self.manifest.data;
        if d.band_specs() != cfg.data.band_specs() || d.aov_m != cfg.data.aov_m {
            return Err(Error::Geometry(format!(
                "dataset {} was generated for profile `{}` with different bands or footprint",
                self.dir.display(),
                self.manifest.profile
            )));
        }
        Ok(())
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.manifest.count).map(|i| self.load(i)).collect()
    }

    fn normalize(&self, rec: SampleRecord, path: &Path) -> Result<Sample> {
        let stats = &self.manifest.bands;
        let n_bands = rec.bands().count();
        if n_bands != stats.len() {
            return Err(Error::Data(format!(
                "{}: {} bands but manifest lists {}",
                path.display(),
                n_bands,
                stats.len()
            )));
        }
        let mut bands = Vec::with_capacity(stats.len());
        for s in stats {
            let r = rec
                .band(s.band_id)
                .ok_or_else(|| Error::Data(format!("{}: band {} missing", path.display(), s.band_id)))?;
            if r.height as usize != s.side || r.width as usize != s.side {
                return Err(Error::Data(format!(
                    "{}: band {} is {}×{}, manifest says {}",
                    path.display(),
                    s.name,
                    r.height,
                    r.width,
                    s.side
                )));
            }
            let inv = if s.std > 0.0 { 1.0 / s.std } else { 1.0 };
            bands.push(r.data.iter().map(|&v| ((v as f64 - s.mean) * inv) as f32).collect());
        }
        let label = match (rec.label(), self.manifest.label_side) {
            (Some(l), Some(side)) if l.height as usize == side && l.width as usize == side => Some(l.data.clone()),
            (Some(l), _) => {
                return Err(Error::Data(format!(
                    "{}: label is {}×{}, manifest says {:?}",
                    path.display(),
                    l.height,
                    l.width,
                    self.manifest.label_side
                )))
            }
            (None, _) => None,
        };
        Ok(Sample {
            id: rec.sample_id,
            bands,
            label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_is_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(&Config::desk().data, "desk", 0, 1, dir.path()).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        assert_eq!(m.count, 0);
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.manifest, m);
    }

    #[test]
    fn stats_match_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let data = Config::desk().data;
        let m = gen_dataset(&data, "desk", 6, 3, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for (b, s) in m.bands.iter().enumerate() {
            let vals: Vec<f64> = (0..6)
                .flat_map(|i| ds.load_raw(i).unwrap().bands().nth(b).unwrap().data.clone())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - s.mean).abs() < 1e-5);
            assert!((var.sqrt() - s.std).abs() < 1e-5);
        }
        let all = ds.load_all().unwrap();
        let b0: Vec<f64> = all.iter().flat_map(|s| s.bands[0].iter().map(|&v| v as f64)).collect();
        let mean = b0.iter().sum::<f64>() / b0.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert_eq!(all[2].label.as_ref().unwrap().len(), 32 * 32);
    }

    #[test]
    fn band_count_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        gen_dataset(&Config::desk().data, "desk", 1, 0, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let mut rec = ds.load_raw(0).unwrap();
        rec.records.remove(3);
        rec.write(&ds.path(0)).unwrap();
        assert!(matches!(ds.load(0), Err(Error::Data(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn paper_dataset_rejected_by_desk_config() {
        let dir = tempfile::tempdir().unwrap();
        let paper = Config::paper();
        gen_dataset(&paper.data, "paper", 0, 1, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.check_compatible(&paper).is_ok());
        assert!(matches!(ds.check_compatible(&Config::desk()), Err(Error::Geometry(_))));
    }
}
