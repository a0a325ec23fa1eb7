//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MEMFUSE\0"
//! version    u32
//! config     32 bytes SHA-256 of the config JSON
//! body_len   u64
//! checksum   32 bytes SHA-256 of the body
//! body:
//!   config_len u32, config JSON
//!   n_tensors  u32
//!   per tensor: name_len u32, name, ndim u32, dims u64 × ndim, values f64 × Π dims
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MEMFUSE\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8 + 32;

/// Serializes the model to bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&(config.len() as u32).to_le_bytes());
    body.extend_from_slice(&config);
    body.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&config));
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn malformed(m: impl Into<String>) -> Error {
    Error::Validation(format!("malformed checkpoint: {}", m.into()))
}

/// Parses and verifies checkpoint bytes into a config and parameter set.
/// Nothing is returned unless every check passes.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Truncated("file shorter than the magic number".into()))? != MAGIC {
        return Err(malformed("bad magic number"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let config_hash = r.take(32)?;
    let body_len = r.u64()? as usize;
    let checksum = r.take(32)?;
    let found = bytes.len() - r.pos;
    if found < body_len {
        return Err(Error::Truncated(format!("body holds {found} of {body_len} bytes")));
    }
    if found > body_len {
        return Err(malformed(format!("{} trailing bytes", found - body_len)));
    }
    let body = &bytes[r.pos..];
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checksum);
    }

    let mut r = Reader { buf: body, pos: 0 };
    let n = r.u32()? as usize;
    let config_json = r.take(n)?;
    if Sha256::digest(config_json).as_slice() != config_hash {
        return Err(malformed("config hash does not match the stored config"));
    }
    let config: ModelConfig = serde_json::from_slice(config_json).map_err(|e| malformed(e.to_string()))?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| malformed(e.to_string()))?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| malformed("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real).collect();
        let t = Tensor::new(shape, data).map_err(|e| malformed(format!("tensor `{name}`: {e}")))?;
        if params.contains(&name) {
            return Err(malformed(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(malformed("unread bytes after the last tensor"));
    }
    Ok((config, params))
}

/// Loads a model with the config stored in the file.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (config, params) = from_bytes(&fs::read(path)?)?;
    Model::from_parts(config, params)
}

/// Replaces the parameters of `model` with those stored at `path`. The file's
/// tensors must match the model's names and shapes; on any error `model` is
/// left unchanged.
pub fn load_params_into(model: &mut Model, path: &Path) -> Result<()> {
    let (_, params) = from_bytes(&fs::read(path)?)?;
    model.set_params(params)
}
