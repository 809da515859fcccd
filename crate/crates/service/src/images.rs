//! Content-addressed PNG store: `<dir>/<sha256 hex>.png`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{ServiceError, ServiceResult};

#[derive(Clone, Debug)]
pub struct ImageStore {
    dir: PathBuf,
}

pub fn is_image_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl ImageStore {
    pub fn open(dir: &Path) -> ServiceResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path_of(&self, id: &str) -> Option<PathBuf> {
        is_image_id(id).then(|| self.dir.join(format!("{id}.png")))
    }

    /// Stores `png` and returns its id. Identical bytes share one file.
    pub fn put(&self, png: &[u8]) -> ServiceResult<String> {
        let id: String = Sha256::digest(png).iter().map(|b| format!("{b:02x}")).collect();
        let path = self.dir.join(format!("{id}.png"));
        if !path.exists() {
            compass_autograd::write_atomic(&path, png).map_err(|e| ServiceError::io(&path, e))?;
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> ServiceResult<Vec<u8>> {
        let path = self
            .path_of(id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id}")))?;
        match std::fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ServiceError::NotFound(format!("image {id}"))),
            Err(e) => Err(ServiceError::io(&path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_addressed_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let s = ImageStore::open(d.path()).unwrap();
        let a = s.put(b"abc").unwrap();
        assert_eq!(a, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(s.put(b"abc").unwrap(), a);
        assert_eq!(s.get(&a).unwrap(), b"abc");
        assert!(matches!(s.get("../etc/passwd"), Err(ServiceError::NotFound(_))));
        assert!(matches!(s.get(&"0".repeat(64)), Err(ServiceError::NotFound(_))));
    }
}
