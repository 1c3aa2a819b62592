//! Content-addressed on-disk cache.
//!
//! Entries live at `<root>/<namespace>/<key[..2]>/<key>.json` where the key is
//! the SHA-256 of the JSON-encoded key parts. Writes go to a temporary file
//! in the same directory and are renamed into place, so concurrent writers
//! never expose a partial entry.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use confilter_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Cache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key<K: Serialize + ?Sized>(parts: &K) -> String {
        let bytes = serde_json::to_vec(parts).expect("cache keys serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    fn path(&self, namespace: &str, key: &str) -> PathBuf {
        self.root.join(namespace).join(&key[..2]).join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get<T: DeserializeOwned>(&self, namespace: &str, key: &str) -> Option<T> {
        let path = self.path(namespace, key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, namespace: &str, key: &str, value: &T) -> Result<()> {
        let path = self.path(namespace, key);
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(dir))?;
        let bytes = serde_json::to_vec(value).expect("cache values serialize");
        tmp.write_all(&bytes).map_err(io(&path))?;
        tmp.persist(&path).map_err(|e| io(&path)(e.error))?;
        Ok(())
    }
}
