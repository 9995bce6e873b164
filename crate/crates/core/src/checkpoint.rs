//! Parameter checkpoint container.
//!
//! Layout: a single-line JSON header, a newline, the 4-byte magic `LRRU`,
//! then every tensor as little-endian `f64` in header order. Header offsets
//! are byte offsets from the first byte after the magic.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRRU";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(params: &ModelParams, config: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        let nbytes = t.len() * 8;
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape(), dtype: "f64".into(), offset, nbytes });
        offset += nbytes;
    }
    let header = Header { format: "lrru-params".into(), version: 1, config, tensors };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(MAGIC);
    out.reserve(offset);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelParams, Header)> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let rest = &bytes[newline + 1..];
    if rest.len() < 4 || &rest[..4] != MAGIC {
        return Err(Error::format(path, "missing LRRU magic"));
    }
    let payload = &rest[4..];
    let mut params = ModelParams::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::format(path, format!("unsupported dtype {}", entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.nbytes != numel * 8 || entry.offset + entry.nbytes > payload.len() {
            return Err(Error::format(path, format!("tensor {} out of bounds", entry.name)));
        }
        let data = payload[entry.offset..entry.offset + entry.nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape, data)?)?;
    }
    Ok((params, header))
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(path: &Path, params: &ModelParams, config: Option<serde_json::Value>) -> Result<()> {
    write_atomic(path, &encode(params, config)?)
}

pub fn load(path: &Path) -> Result<(ModelParams, Header)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
