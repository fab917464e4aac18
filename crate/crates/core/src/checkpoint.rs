//! Model checkpoints.
//!
//! Little-endian layout: magic `PVCK`, u16 version, u32-length-prefixed
//! UTF-8 config text, u32 tensor count; per tensor a u32-length-prefixed
//! name, u8 rank, `rank` u32 dims and the f32 values.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PVCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(cfg: &Config, store: &ParamStore<f32>) -> Self {
        Self {
            config_text: cfg.to_toml(),
            tensors: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_toml(&self.config_text)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copy every checkpoint tensor whose name exists in `store`; returns
    /// how many were copied. Shape disagreements are data errors.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<usize> {
        let mut n = 0;
        for t in &self.tensors {
            let Some(id) = store.id(&t.name) else { continue };
            let dst = store.value_mut(id);
            if dst.shape() != t.shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    dst.shape()
                )));
            }
            *dst = Tensor::new(t.shape.clone(), t.data.clone())?;
            n += 1;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text)?;
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name)?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Data(format!("tensor `{}` has rank {}", t.name, t.shape.len())))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Data(format!("tensor `{}` data does not match its shape", t.name)));
            }
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path.display(), "bad magic (expected PVCK)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(path.display(), format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::format(path.display(), format!("tensor `{name}` too large")))?;
            let data = r
                .take(count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path.display(), format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("length {n} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path.display(),
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(path.display(), "invalid UTF-8 string"))
    }
}
