//! Single-file tensor container.
//!
//! Layout (little-endian): magic `SRFCKPT1`, format version `u32`, metadata
//! length `u32`, UTF-8 JSON metadata, tensor count `u32`, then per tensor
//! `{name_len u32, name, dtype u8 (0 = f32), ndim u8, dims u32 x ndim,
//! offset u64}`, then the raw f32 payloads at their absolute offsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SRFCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub upsampler: String,
    pub config_hash: String,
    pub format_version: u32,
    pub seed: u64,
    /// Full configuration text of the producing run.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_module<T: Float, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        self.tensors.extend(module.state_dict(prefix));
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Load every tensor of `module` from names under `prefix`; on error the
    /// module is left untouched.
    pub fn load_module<T: Float, M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        module.load_state_dict(prefix, &self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        header.extend_from_slice(&meta);
        header.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let table_len: usize = self
            .tensors
            .iter()
            .map(|(name, t)| 4 + name.len() + 2 + 4 * t.shape().len() + 8)
            .sum();
        let mut offset = (header.len() + table_len) as u64;
        let mut table = Vec::with_capacity(table_len);
        for (name, t) in &self.tensors {
            if t.shape().len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor '{name}' has too many dimensions")));
            }
            table.extend_from_slice(&(name.len() as u32).to_le_bytes());
            table.extend_from_slice(name.as_bytes());
            table.push(DTYPE_F32);
            table.push(t.shape().len() as u8);
            for &d in t.shape() {
                table.extend_from_slice(&(d as u32).to_le_bytes());
            }
            table.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        let mut out = header;
        out.extend_from_slice(&table);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor '{name}': unsupported dtype {dtype}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            entries.push((name, dims, offset));
        }
        let mut tensors = BTreeMap::new();
        let mut payload_end = r.pos;
        for (name, dims, offset) in entries {
            let n: usize = dims.iter().product();
            let end = offset
                .checked_add(4 * n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' payload out of bounds")))?;
            if offset != payload_end {
                return Err(Error::Checkpoint(format!("tensor '{name}' payload at {offset}, expected {payload_end}")));
            }
            payload_end = end;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&dims, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        if payload_end != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - payload_end)));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}
