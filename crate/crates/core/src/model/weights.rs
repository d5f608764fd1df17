//! Named-tensor container and its binary file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "AULC"        4 bytes
//! version u16          currently 1
//! count   u32          number of tensors
//! per tensor:
//!   path_len u16, path UTF-8 bytes
//!   rank u8, dims u32 * rank
//!   values f32 * product(dims), row-major
//! ```
//!
//! Tensor order is preserved exactly, so serialization is byte-stable and
//! the checksum is meaningful across runs and platforms.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const WEIGHT_STORE_MAGIC: &[u8; 4] = b"AULC";
pub const WEIGHT_STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered map from layer path to shaped f32 tensor.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        if self.index.contains_key(path) {
            return Err(Error::WeightStore(format!("duplicate tensor {path}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::WeightStore(format!(
                "tensor {path}: shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        self.index.insert(path.to_string(), self.entries.len());
        self.entries.push(WeightEntry { path: path.to_string(), shape, values });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&WeightEntry> {
        self.index.get(path).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WeightEntry> {
        self.entries.iter()
    }

    /// Total parameter count across all tensors.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_STORE_MAGIC);
        out.extend_from_slice(&WEIGHT_STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.path.len() as u16).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::WeightStore("truncated weight store".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != WEIGHT_STORE_MAGIC {
            return Err(Error::WeightStore("bad magic (expected AULC)".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != WEIGHT_STORE_VERSION {
            return Err(Error::WeightStore(format!(
                "unsupported version {version}, expected {WEIGHT_STORE_VERSION}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut store = Self::new();
        for _ in 0..count {
            let path_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let path = std::str::from_utf8(take(&mut pos, path_len)?)
                .map_err(|_| Error::WeightStore("tensor path is not UTF-8".into()))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&path, shape, values)?;
        }
        if pos != bytes.len() {
            return Err(Error::WeightStore(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// FNV-1a over the serialized bytes.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for b in self.to_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        s.insert("a.bias", vec![2], vec![-0.5, 0.25]).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let loaded = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.get("a.weight").unwrap().shape, vec![2, 3]);
        assert_eq!(loaded.checksum(), s.checksum());
    }

    #[test]
    fn header_layout() {
        let bytes = sample_store().to_bytes();
        assert_eq!(&bytes[..4], b"AULC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]), 2);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(WeightStore::from_bytes(b"NOPE").is_err());
        let mut bytes = sample_store().to_bytes();
        bytes[4] = 9; // version
        assert!(WeightStore::from_bytes(&bytes).is_err());
        let mut bytes = sample_store().to_bytes();
        bytes.push(0);
        assert!(WeightStore::from_bytes(&bytes).is_err());
        let bytes = sample_store().to_bytes();
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn duplicate_and_shape_mismatch_rejected() {
        let mut s = sample_store();
        assert!(s.insert("a.bias", vec![2], vec![0.0, 0.0]).is_err());
        assert!(s.insert("b", vec![3], vec![0.0]).is_err());
    }
}
