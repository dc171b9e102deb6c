//! Checkpoint encoding: a magic header, the model config as JSON, and
//! every named tensor as little-endian f64 rows. The encoding is
//! deterministic, so hashing the bytes gives a stable content version
//! shared by a model in memory and the file it was saved to.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GesrError, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::GesrModel;

const MAGIC: &[u8; 8] = b"GESRCKPT";
const FORMAT_VERSION: u32 = 1;

fn format_err(origin: &str, detail: impl Into<String>) -> GesrError {
    GesrError::Format {
        path: origin.to_string(),
        detail: detail.into(),
    }
}

/// Serializes a model to the checkpoint byte format.
pub fn to_bytes(model: &GesrModel) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(model.config())?;
    let mut out = Vec::with_capacity(config_json.len() + model.store.num_scalars() * 8 + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, tensor) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(tensor.value.cols() as u32).to_le_bytes());
        for &v in tensor.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Hex SHA-256 of a checkpoint byte stream: the model version string.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.origin,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

/// Rebuilds a model from checkpoint bytes: constructs the architecture
/// from the embedded config and seed, then overwrites every tensor by
/// name. The stored tensor set must match the rebuilt one exactly.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<GesrModel> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if cur.take(8)? != MAGIC {
        return Err(format_err(origin, "bad magic (not a checkpoint)"));
    }
    let ver = cur.u32()?;
    if ver != FORMAT_VERSION {
        return Err(format_err(
            origin,
            format!("format version {ver}, this build reads {FORMAT_VERSION}"),
        ));
    }
    let seed = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)
        .map_err(|e| format_err(origin, format!("config block: {e}")))?;

    let mut model = GesrModel::new(config, seed)?;
    let count = cur.u32()? as usize;
    if count != model.store.len() {
        return Err(format_err(
            origin,
            format!(
                "checkpoint holds {count} tensors, architecture expects {}",
                model.store.len()
            ),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| format_err(origin, "tensor name is not utf-8"))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| format_err(origin, format!("unknown tensor '{name}'")))?;
        if seen[id.index()] {
            return Err(format_err(origin, format!("tensor '{name}' repeated")));
        }
        seen[id.index()] = true;
        let expect = model.store.value(id).dims();
        if expect != (rows, cols) {
            return Err(format_err(
                origin,
                format!(
                    "tensor '{name}' is {rows}x{cols}, architecture expects {}x{}",
                    expect.0, expect.1
                ),
            ));
        }
        let raw = cur.take(rows * cols * 8)?;
        let dst = model.store.get_mut(id).value.data_mut();
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(
                    origin,
                    format!("tensor '{name}' entry {i} is not finite"),
                ));
            }
            dst[i] = v;
        }
    }
    if cur.pos != bytes.len() {
        return Err(format_err(
            origin,
            format!("{} trailing bytes after last tensor", bytes.len() - cur.pos),
        ));
    }
    model.set_version(content_hash(bytes));
    Ok(model)
}

/// Writes the checkpoint and returns its content hash.
pub fn save(model: &GesrModel, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<GesrModel> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
