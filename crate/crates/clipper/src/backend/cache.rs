//! Append-only inference cache keyed by request digest.
//!
//! Entries are flushed to disk as they arrive (one JSON object per line), so
//! a killed run loses at most the line being written; the loader skips a
//! torn trailing line. A key, once written, is never overwritten.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::InferenceResponse;
use crate::error::Error;

pub type CachedValue = InferenceResponse;

#[derive(Serialize, Deserialize)]
struct CacheLine {
    digest: String,
    #[serde(flatten)]
    value: CachedValue,
}

struct CacheState {
    entries: HashMap<String, CachedValue>,
    writer: Option<BufWriter<std::fs::File>>,
}

/// Append-only store of completed inferences. Safe for concurrent use; the
/// first write for a digest sticks and later writes are ignored.
pub struct InferenceCache {
    state: Mutex<CacheState>,
    path: Option<PathBuf>,
}

impl InferenceCache {
    /// Purely in-memory cache (tests, one-shot runs).
    pub fn in_memory() -> Self {
        InferenceCache {
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                writer: None,
            }),
            path: None,
        }
    }

    /// Open or create a file-backed cache, loading any existing entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(format!("read cache {}", path.display()), e))?;
            // a torn final line must not swallow the next append
            needs_newline = !text.is_empty() && !text.ends_with('\n');
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(entry) => {
                        // first write sticks
                        entries.entry(entry.digest).or_insert(entry.value);
                    }
                    Err(_) => {
                        // torn trailing line from an interrupted run
                        eprintln!("cache {}: skipping unparseable line", path.display());
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("open cache {}", path.display()), e))?;
        let mut writer = BufWriter::new(file);
        if needs_newline {
            writeln!(writer)
                .and_then(|_| writer.flush())
                .map_err(|e| Error::io(format!("write cache {}", path.display()), e))?;
        }
        Ok(InferenceCache {
            state: Mutex::new(CacheState {
                entries,
                writer: Some(writer),
            }),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<CachedValue> {
        self.state.lock().unwrap().entries.get(digest).cloned()
    }

    /// Record a completed inference. Returns false (and writes nothing) if
    /// the digest was already present. The on-disk log is flushed before
    /// returning, so the entry survives an abrupt kill.
    pub fn insert(&self, digest: &str, value: CachedValue) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.entries.contains_key(digest) {
            return false;
        }
        state.entries.insert(digest.to_string(), value.clone());
        if let Some(writer) = state.writer.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                digest: digest.to_string(),
                value,
            })
            .expect("cache entry serializes");
            // Failures to persist are reported but do not poison the run;
            // the in-memory entry still serves this process.
            if let Err(e) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
                eprintln!("cache write failed: {e}");
            }
        }
        true
    }
}
