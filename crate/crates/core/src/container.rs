//! Binary sample container.
//!
//! Little-endian layout: magic `PVFS`, u16 version, u16 record count,
//! u64 sample id; then per record u16 band id, u8 kind (0 band, 1 label),
//! u32 height, u32 width and `height·width` f32 values.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVFS";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_HEADER_BYTES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Band,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub band_id: u16,
    pub kind: RecordKind,
    pub height: u32,
    pub width: u32,
    pub data: Vec<f32>,
}

/// One area of view: every band at its native size plus an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub records: Vec<Record>,
}

impl SampleRecord {
    pub fn band(&self, band_id: u16) -> Option<&Record> {
        self.records
            .iter()
            .find(|r| r.kind == RecordKind::Band && r.band_id == band_id)
    }

    pub fn bands(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.kind == RecordKind::Band)
    }

    pub fn label(&self) -> Option<&Record> {
        self.records.iter().find(|r| r.kind == RecordKind::Label)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .records
                .iter()
                .map(|r| RECORD_HEADER_BYTES + 4 * r.data.len())
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = u16::try_from(self.records.len())
            .map_err(|_| Error::Data(format!("{} records exceed the container limit", self.records.len())))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&self.sample_id.to_le_bytes());
        for r in &self.records {
            if r.data.len() != r.height as usize * r.width as usize {
                return Err(Error::Data(format!(
                    "record {} holds {} values for {}×{}",
                    r.band_id,
                    r.data.len(),
                    r.height,
                    r.width
                )));
            }
            out.extend_from_slice(&r.band_id.to_le_bytes());
            out.push(match r.kind {
                RecordKind::Band => 0,
                RecordKind::Label => 1,
            });
            out.extend_from_slice(&r.height.to_le_bytes());
            out.extend_from_slice(&r.width.to_le_bytes());
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path.display(), "bad magic (expected PVFS)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(path.display(), format!("unsupported version {version}")));
        }
        let n = r.u16()?;
        let sample_id = r.u64()?;
        let mut records = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let band_id = r.u16()?;
            let kind = match r.take(1)?[0] {
                0 => RecordKind::Band,
                1 => RecordKind::Label,
                k => return Err(Error::format(path.display(), format!("unknown record kind {k}"))),
            };
            let height = r.u32()?;
            let width = r.u32()?;
            let count = height as usize * width as usize;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::format(path.display(), "record too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            records.push(Record {
                band_id,
                kind,
                height,
                width,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path.display(), format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { sample_id, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
