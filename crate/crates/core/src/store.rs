//! Content-addressed artifact store.
//!
//! Bytes live under `store/<kind>/<d0d1>/<digest>` where the digest is the
//! hex SHA-256 of the content. The store is append-only and idempotent:
//! writing the same bytes twice is a no-op, and nothing ever mutates the
//! file behind an existing digest. Writers are safe to run concurrently
//! because every write goes to a temp file and is renamed into place.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Image,
    TextBlob,
}

impl ContentKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            ContentKind::Image => "image",
            ContentKind::TextBlob => "text_blob",
        }
    }
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Pointer to immutable stored bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentRef {
    pub kind: ContentKind,
    /// Hex SHA-256 of the content.
    pub digest: String,
    /// Path relative to the store root.
    pub path: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("refusing to store empty content")]
    EmptyContent,
    #[error("store io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("digest mismatch for {path}: expected {expected}, found {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
}

pub struct Store {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Store {
            root,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn rel_path(kind: ContentKind, digest: &str) -> String {
        format!("{}/{}/{}", kind.dir_name(), &digest[..2], digest)
    }

    pub fn abs_path(&self, r: &ContentRef) -> PathBuf {
        self.root.join(&r.path)
    }

    /// Stores bytes, writing the backing file at most once per digest.
    pub fn put(&self, bytes: &[u8], kind: ContentKind) -> Result<ContentRef, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyContent);
        }
        let digest = sha256_hex(bytes);
        let rel = Self::rel_path(kind, &digest);
        let path = self.root.join(&rel);
        if !path.exists() {
            let dir = path.parent().expect("store path has parent");
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
            let tmp = dir.join(format!(".tmp-{}-{}-{}", std::process::id(), n, &digest[..8]));
            {
                let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
                f.write_all(bytes).map_err(io_err(&tmp))?;
                f.sync_all().map_err(io_err(&tmp))?;
            }
            // Rename is atomic; a concurrent writer of the same digest wins
            // or loses harmlessly because both temp files hold equal bytes.
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(ContentRef {
            kind,
            digest,
            path: rel,
        })
    }

    pub fn get(&self, r: &ContentRef) -> Result<Vec<u8>, StoreError> {
        let path = self.abs_path(r);
        fs::read(&path).map_err(io_err(&path))
    }

    /// Reads the bytes back and recomputes the digest.
    pub fn verify(&self, r: &ContentRef) -> Result<Vec<u8>, StoreError> {
        let bytes = self.get(r)?;
        let actual = sha256_hex(&bytes);
        if actual != r.digest {
            return Err(StoreError::DigestMismatch {
                path: self.abs_path(r),
                expected: r.digest.clone(),
                actual,
            });
        }
        Ok(bytes)
    }
}
