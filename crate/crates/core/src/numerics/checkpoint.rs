//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "PDLGCKPT"
//! version    u32
//! seed       u64
//! config     u64 length + UTF-8 JSON
//! count      u32
//! per parameter:
//!   name     u32 length + UTF-8
//!   rows     u32
//!   cols     u32
//!   values   rows * cols f64, row-major
//! ```

use std::fs;
use std::path::Path;

use super::params::{Matrix, ParameterStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PDLGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub params: ParameterStore,
}

pub fn encode(config: &serde_json::Value, params: &ParameterStore) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(config)?;
    let mut out = Vec::with_capacity(32 + config.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let seed = r.u64()?;
    let config_len = r.u64()? as usize;
    let config: serde_json::Value = serde_json::from_str(r.string(config_len)?)?;
    let count = r.u32()?;
    let mut params = ParameterStore::new(seed);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(&name, m)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        version,
        config,
        params,
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write(path: &Path, config: &serde_json::Value, params: &ParameterStore) -> Result<()> {
    let bytes = encode(config, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
