//! Named parameter collections and their on-disk container.
//!
//! Container layout (little endian):
//! `b"CMPW"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols, `rows*cols` f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMPW";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights container (bad magic)")]
    BadMagic,
    #[error("unsupported weights container version {0}")]
    Version(u32),
    #[error("corrupt weights container: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    /// Panics if the parameter is missing; model code only asks for names it created.
    pub fn expect(&self, name: &str) -> Arc<Tensor> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Mutable access; clones the tensor if it is shared.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    /// Merges `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ParamError> {
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ParamError::BadMagic);
        }
        let version = read_u32(&mut bytes)?;
        if version != VERSION {
            return Err(ParamError::Version(version));
        }
        let count = read_u32(&mut bytes)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut bytes)? as usize;
            if name_len > bytes.len() {
                return Err(ParamError::Corrupt("name length past end".into()));
            }
            let (name, rest) = bytes.split_at(name_len);
            let name = std::str::from_utf8(name)
                .map_err(|e| ParamError::Corrupt(e.to_string()))?
                .to_string();
            bytes = rest;
            let rows = read_u32(&mut bytes)? as usize;
            let cols = read_u32(&mut bytes)? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| ParamError::Corrupt("shape overflow".into()))?;
            if n * 8 > bytes.len() {
                return Err(ParamError::Corrupt(format!("tensor `{name}` truncated")));
            }
            let mut data = Vec::with_capacity(n);
            for chunk in bytes[..n * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
            }
            bytes = &bytes[n * 8..];
            store.insert(name, Tensor::from_vec(rows, cols, data));
        }
        if !bytes.is_empty() {
            return Err(ParamError::Corrupt("trailing bytes".into()));
        }
        Ok(store)
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32, ParamError> {
    let mut buf = [0u8; 4];
    bytes
        .read_exact(&mut buf)
        .map_err(|_| ParamError::Corrupt("unexpected end of data".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trips_bit_exactly(
            shapes in proptest::collection::vec((0usize..5, 0usize..5), 0..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            for (i, (r, c)) in shapes.into_iter().enumerate() {
                store.insert(format!("t{i}"), Tensor::randn(r, c, 3.0, &mut rng));
            }
            let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn truncated_container_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(2, 2, 1.5));
        let bytes = store.to_bytes();
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ParamError::Corrupt(_))
        ));
        assert!(matches!(
            ParamStore::from_bytes(b"nope"),
            Err(ParamError::BadMagic)
        ));
    }
}
