//! Content-addressed cache for provider responses, embeddings, and other
//! byte payloads. Entries live in a two-level hex fan-out under the cache
//! root, each file carrying its own payload digest so corruption is caught
//! on read instead of being served.
//!
//! Writers stage into a temp file and atomically rename, so concurrent
//! puts of the same key converge to one entry and readers never observe a
//! partial write.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Stable 64-bit hash (sha256 prefix); used for seed derivation, not
/// addressing.
pub fn stable_hash64(data: &[u8]) -> u64 {
    let d = Sha256::digest(data);
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Length-framed multi-part variant of [`stable_hash64`].
pub fn stable_hash64_parts(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let d = hasher.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache io at `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt cache entry `{key}` (digest mismatch); entry evicted")]
    CorruptEntry { key: String },
}

/// Digest over every input that determines a provider response.
///
/// Equal inputs produce equal keys; changing any field changes the key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    /// Builds a key from length-framed parts so no two part lists collide
    /// by concatenation.
    pub fn from_parts(parts: &[&[u8]]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        CacheKey(hex::encode(hasher.finalize()))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

const HEADER_PREFIX: &str = "sha256:";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Filesystem-backed store. Cloneable handle; all methods take `&self`.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let hex = key.as_hex();
        self.root.join(&hex[0..2]).join(&hex[2..4]).join(hex)
    }

    /// Fetches a payload. `Ok(None)` is a miss; a digest mismatch evicts
    /// the entry and returns `CorruptEntry`.
    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, CacheError> {
        let path = self.entry_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(CacheError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let Some(split) = bytes.iter().position(|&b| b == b'\n') else {
            let _ = std::fs::remove_file(&path);
            return Err(CacheError::CorruptEntry {
                key: key.as_hex().to_string(),
            });
        };
        let header = &bytes[..split];
        let payload = &bytes[split + 1..];
        let expected = header
            .strip_prefix(HEADER_PREFIX.as_bytes())
            .map(|h| h.to_vec());
        let actual = sha256_hex(payload);
        if expected.as_deref() != Some(actual.as_bytes()) {
            let _ = std::fs::remove_file(&path);
            return Err(CacheError::CorruptEntry {
                key: key.as_hex().to_string(),
            });
        }
        Ok(Some(payload.to_vec()))
    }

    /// Stores a payload atomically. Concurrent puts of the same key all
    /// succeed and leave exactly one entry.
    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> Result<(), CacheError> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry path has parent");
        let io_err = |p: &Path, source: std::io::Error| CacheError::Io {
            path: p.display().to_string(),
            source,
        };
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;

        let mut contents = Vec::with_capacity(HEADER_PREFIX.len() + 65 + payload.len());
        contents.extend_from_slice(HEADER_PREFIX.as_bytes());
        contents.extend_from_slice(sha256_hex(payload).as_bytes());
        contents.push(b'\n');
        contents.extend_from_slice(payload);

        let tmp = parent.join(format!(
            ".tmp-{}-{}-{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed),
            key.as_hex().get(..8).unwrap_or("k")
        ));
        std::fs::write(&tmp, &contents).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Removes entries whose keys are not in `referenced`; returns how many
    /// were deleted.
    pub fn gc(&self, referenced: &BTreeSet<String>) -> Result<usize, CacheError> {
        let mut removed = 0;
        for key in self.list()? {
            if !referenced.contains(key.as_hex()) {
                let path = self.entry_path(&key);
                std::fs::remove_file(&path).map_err(|source| CacheError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                removed += 1;
            }
        }
        Ok(removed)
    }

    /// All keys currently stored, ascending.
    pub fn list(&self) -> Result<Vec<CacheKey>, CacheError> {
        let mut keys = Vec::new();
        if !self.root.exists() {
            return Ok(keys);
        }
        for l1 in read_dir_sorted(&self.root)? {
            if !l1.is_dir() {
                continue;
            }
            for l2 in read_dir_sorted(&l1)? {
                if !l2.is_dir() {
                    continue;
                }
                for entry in read_dir_sorted(&l2)? {
                    if let Some(name) = entry.file_name().and_then(|n| n.to_str()) {
                        if name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit()) {
                            keys.push(CacheKey(name.to_string()));
                        }
                    }
                }
            }
        }
        keys.sort();
        Ok(keys)
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, CacheError> {
    let rd = std::fs::read_dir(dir).map_err(|source| CacheError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    Ok(paths)
}
