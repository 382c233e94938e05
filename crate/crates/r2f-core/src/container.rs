//! Binary checkpoint container shared by model, adapter-gradient dataset,
//! and decoder artifacts.
//!
//! Layout (little-endian):
//!   magic "R2F1" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//!   | entry_count u64 | entries (name_len u64, name, dtype u8 = 0 for f32,
//!     ndim u64, dims u64..., offset u64) | payload_len u64 | payload
//!   | checksum u64
//!
//! The trailing checksum is the first 8 bytes of SHA-256 over the payload.
//! Writes are atomic (temp file + rename). Save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"R2F1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub struct Container {
    pub meta: String,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container { meta: meta.into(), entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Container(format!("duplicate entry name '{name}'")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing entry '{name}'")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<u8> = Vec::new();
        let mut table: Vec<(String, Vec<usize>, u64)> = Vec::new();
        for (name, t) in &self.entries {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            table.push((name.clone(), t.shape().to_vec(), offset));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta_bytes = self.meta.as_bytes();
        out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(meta_bytes);
        out.extend_from_slice(&(table.len() as u64).to_le_bytes());
        for (name, shape, offset) in &table {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Container(format!("bad magic {:?}", &magic[..4])));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|e| Error::Container(format!("meta not UTF-8: {e}")))?;
        let entry_count = r.u64()? as usize;
        let mut table = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Container(format!("name not UTF-8: {e}")))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Container(format!("unknown dtype {dtype}")));
            }
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let actual = checksum64(payload);
        if stored != actual {
            return Err(Error::Container(format!(
                "payload checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
            )));
        }

        let mut entries = Vec::with_capacity(table.len());
        let mut seen = std::collections::BTreeSet::new();
        let mut expected_offset = 0usize;
        for (name, shape, offset) in table {
            if !seen.insert(name.clone()) {
                return Err(Error::Container(format!("duplicate entry name '{name}'")));
            }
            let numel: usize = shape.iter().product();
            let byte_len = numel * 4;
            if offset != expected_offset || offset + byte_len > payload.len() {
                return Err(Error::Container(format!(
                    "entry '{name}' offset {offset} out of bounds or overlapping"
                )));
            }
            expected_offset = offset + byte_len;
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let b = &payload[offset + i * 4..offset + i * 4 + 4];
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Container { meta, entries })
    }

    /// Write via a temp file in the same directory, then rename.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path)?;
        Container::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container(format!(
                "truncated container: wanted {n} bytes at {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Atomic file write shared by every artifact producer.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// First 8 bytes of SHA-256, little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hex SHA-256 prefix of a byte string (checkpoint identity in manifests).
pub fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    crate::model::hex_prefix(&digest, 16)
}
