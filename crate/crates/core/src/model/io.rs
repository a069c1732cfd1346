//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "DLABMDL\0"
//! version      u32
//! config_len   u64, then config_len bytes of JSON (ModelConfig)
//! source_depth u64
//! n_blocks     u64, then n_blocks × u64 provenance entries
//! n_params     u64, then per parameter in storage order:
//!     name_len u32, name bytes (UTF-8)
//!     ndim     u32, ndim × u64 extents
//!     data     product(extents) × f64
//! checksum     32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DLABMDL\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything between the version field and the checksum.
pub(crate) fn encode_body(model: &TransformerModel) -> Vec<u8> {
    let mut out = Vec::new();
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend((config.len() as u64).to_le_bytes());
    out.extend(config);
    out.extend((model.source_depth() as u64).to_le_bytes());
    out.extend((model.provenance().len() as u64).to_le_bytes());
    for &p in model.provenance() {
        out.extend((p as u64).to_le_bytes());
    }
    let slots = model.slots();
    out.extend((slots.len() as u64).to_le_bytes());
    for slot in slots {
        let name = slot.name();
        let t = model.param(slot);
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::from(&MAGIC[..]);
    bytes.extend(FORMAT_VERSION.to_le_bytes());
    bytes.extend(encode_body(model));
    let digest = Sha256::digest(&bytes);
    bytes.extend(digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }
}

fn decode(bytes: &[u8]) -> Result<TransformerModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Format("file too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    let version = u32::from_le_bytes(content[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: content, pos: 12 };
    let config_len = c.len()?;
    let config: ModelConfig =
        serde_json::from_slice(c.take(config_len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let source_depth = c.len()?;
    let n_blocks = c.len()?;
    let provenance = (0..n_blocks).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
    if n_blocks != config.n_layers {
        return Err(Error::Format(format!(
            "{n_blocks} provenance entries for {} layers",
            config.n_layers
        )));
    }
    let n_params = c.len()?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        c.take(name_len)?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.saturating_mul(8) <= content.len())
            .ok_or_else(|| Error::Format(format!("implausible shape {shape:?}")))?;
        let raw = c.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if c.pos != content.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    TransformerModel::from_parts(config, params, provenance, source_depth)
}
