//! Content-addressed object store for image payloads.
//!
//! Each payload is stored once under its SHA-256 hex digest, written to a
//! temporary name and renamed into place so readers never see half a file.

use std::path::PathBuf;

use crate::store::ledger::{sha256_hex, StoreError};

pub struct ObjectStore {
    dir: PathBuf,
}

impl ObjectStore {
    /// Opens (creating if needed) the store rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ObjectStore { dir })
    }

    pub fn path_of(&self, digest: &str) -> PathBuf {
        self.dir.join(digest)
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.path_of(digest).is_file()
    }

    /// Stores a payload and returns its digest. Re-storing existing content
    /// is a no-op.
    pub fn put(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let digest = sha256_hex(bytes);
        let target = self.path_of(&digest);
        if !target.exists() {
            let tmp = self.dir.join(format!(".tmp-{digest}"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &target)?;
        }
        Ok(digest)
    }

    /// Loads and verifies a payload.
    pub fn get(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(digest);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::MissingObject { digest: digest.to_string() },
            _ => StoreError::Io(e),
        })?;
        if sha256_hex(&bytes) != digest {
            return Err(StoreError::CorruptObject { digest: digest.to_string() });
        }
        Ok(bytes)
    }
}
