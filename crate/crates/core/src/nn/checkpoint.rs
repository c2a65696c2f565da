//! `RSCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RSCK" | version: u16 | header_len: u32 | header (UTF-8, header_len bytes) | payload
//! ```
//!
//! Header lines are tab separated:
//!
//! ```text
//! meta  <key>  <JSON value>
//! param <name> <d0>x<d1>x...  <byte offset into payload>
//! ```
//!
//! The payload is the concatenation of every parameter as `f32` values.
//! Values are held in memory already rounded to `f32`, so a save/load cycle
//! reproduces the checkpoint exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelCheckpoint {
    meta: BTreeMap<String, String>,
    params: BTreeMap<String, Tensor>,
}

fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl ModelCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of `params`, rounded to 32-bit precision.
    pub fn from_params(params: &ParamSet) -> Self {
        let mut ck = Self::new();
        ck.merge_params(params);
        ck
    }

    pub fn merge_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.params.insert(name.to_string(), quantize(t));
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (k, v) in &self.params {
            ps.insert(k.clone(), v.clone());
        }
        ps
    }

    /// Parameters whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamSet {
        self.params().with_prefix(prefix)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        if key.contains(['\t', '\n']) || key.is_empty() {
            return Err(Error::Checkpoint(format!("invalid metadata key {key:?}")));
        }
        self.meta.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata '{key}'")))?;
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata '{key}': {e}")))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("param\t{name}\t{}\t{offset}\n", dims.join("x")));
            offset += 4 * t.len();
        }
        let mut out = Vec::with_capacity(10 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.params.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("missing RSCK magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let payload_start = 10usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header = std::str::from_utf8(&bytes[10..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut ck = ModelCheckpoint::new();
        let mut expected = 0usize;
        for (lineno, line) in header.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", key, value] => {
                    ck.meta.insert(key.to_string(), value.to_string());
                }
                ["param", name, dims, offset] => {
                    let shape: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(format!("header line {}: bad shape {dims:?}: {e}", lineno + 1)))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|e| bad(format!("header line {}: bad offset: {e}", lineno + 1)))?;
                    if offset != expected {
                        return Err(bad(format!("parameter '{name}' at offset {offset}, expected {expected}")));
                    }
                    let n: usize = shape.iter().product();
                    let end = offset + 4 * n;
                    if end > payload.len() {
                        return Err(bad(format!(
                            "payload truncated: '{name}' needs bytes up to {end}, payload has {}",
                            payload.len()
                        )));
                    }
                    let data = payload[offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    ck.params.insert(name.to_string(), Tensor::new(shape, data)?);
                    expected = end;
                }
                _ => return Err(bad(format!("header line {}: unrecognised entry", lineno + 1))),
            }
        }
        if expected != payload.len() {
            return Err(bad(format!("payload is {} bytes, header describes {expected}", payload.len())));
        }
        Ok(ck)
    }

    /// Writes via a temporary sibling file and rename, so a failed write
    /// never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
