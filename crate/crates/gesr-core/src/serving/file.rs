//! Item-cache file format: a header carrying the checkpoint hash and the
//! per-entry widths, then fixed-width entries sorted by post id.
//!
//! Layout (all integers little-endian):
//!   magic "GESRCACH" | u32 format version | u32 hash length | hash bytes
//!   | u32 item vector width | u32 hma pair count | u64 entry count
//!   | entries: u32 post_id, width x f64 vector, pairs x u32 feature ids
//!
//! Sorting by post id makes the encoding canonical: saving the same index
//! twice produces identical bytes.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{GesrError, Result};
use crate::serving::{ItemCacheEntry, ServingIndex};

const MAGIC: &[u8; 8] = b"GESRCACH";
const FORMAT_VERSION: u32 = 1;

fn format_err(origin: &str, detail: impl Into<String>) -> GesrError {
    GesrError::Format {
        path: origin.to_string(),
        detail: detail.into(),
    }
}

pub fn to_bytes(index: &ServingIndex) -> Vec<u8> {
    let hash = index.checkpoint_version().as_bytes();
    let entries = index.sorted_entries();
    let width = index.item_width();
    let pairs = index.hma_pairs();
    let entry_bytes = 4 + width * 8 + pairs * 4;
    let mut out = Vec::with_capacity(32 + hash.len() + entries.len() * entry_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(pairs as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.post_id.to_le_bytes());
        for &v in &e.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &id in &e.hma_feature_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
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

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<ServingIndex> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if cur.take(8)? != MAGIC {
        return Err(format_err(origin, "bad magic (not an item cache)"));
    }
    let ver = cur.u32()?;
    if ver != FORMAT_VERSION {
        return Err(format_err(
            origin,
            format!("format version {ver}, this build reads {FORMAT_VERSION}"),
        ));
    }
    let hash_len = cur.u32()? as usize;
    let version = std::str::from_utf8(cur.take(hash_len)?)
        .map_err(|_| format_err(origin, "checkpoint hash is not utf-8"))?
        .to_string();
    let width = cur.u32()? as usize;
    let pairs = cur.u32()? as usize;
    let count = cur.u64()? as usize;
    let mut entries = HashMap::with_capacity(count);
    let mut last_id: Option<u32> = None;
    for i in 0..count {
        let post_id = cur.u32()?;
        if let Some(prev) = last_id {
            if post_id <= prev {
                return Err(format_err(
                    origin,
                    format!("entry {i} out of order: post {post_id} after {prev}"),
                ));
            }
        }
        last_id = Some(post_id);
        let mut vector = Vec::with_capacity(width);
        for chunk in cur.take(width * 8)?.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(
                    origin,
                    format!("post {post_id} has a non-finite vector entry"),
                ));
            }
            vector.push(v);
        }
        let mut ids = Vec::with_capacity(pairs);
        for chunk in cur.take(pairs * 4)?.chunks_exact(4) {
            ids.push(u32::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.insert(
            post_id,
            ItemCacheEntry {
                post_id,
                vector,
                hma_feature_ids: ids,
            },
        );
    }
    if cur.pos != bytes.len() {
        return Err(format_err(
            origin,
            format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
        ));
    }
    Ok(ServingIndex::from_parts(entries, version, width, pairs))
}

pub fn save_cache(index: &ServingIndex, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(index))?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<ServingIndex> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
