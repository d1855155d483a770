//! Append-only JSONL response cache.
//!
//! Each line stores one completed request. On open, the whole file is read
//! into memory; corrupt lines are skipped with a warning so a truncated
//! write (killed process, full disk) never poisons the cache. Later entries
//! for the same key win, matching append semantics.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{CacheKey, ChatRequest};

const CACHE_FILE: &str = "responses.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    request: ChatRequest,
    content: String,
    /// Seconds since the Unix epoch when the entry was written.
    timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub file_bytes: u64,
    pub path: Option<String>,
}

/// In-memory map of cache key to response content, optionally mirrored to a
/// JSONL file so later runs start warm.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    /// Open (or create) the cache file under `dir`.
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(fs::File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(record) => {
                        entries.insert(record.key, record.content);
                    }
                    Err(err) => {
                        log::warn!(
                            "skipping corrupt cache line {} in {}: {err}",
                            lineno + 1,
                            path.display()
                        );
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    /// Purely in-memory cache; nothing survives the process.
    pub fn ephemeral() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.entries.lock().expect("cache lock").get(&key.0).cloned()
    }

    pub fn put(&self, key: &CacheKey, request: &ChatRequest, content: &str) -> io::Result<()> {
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key.0.clone(), content.to_string());
        if let Some(path) = &self.path {
            let record = CacheRecord {
                key: key.0.clone(),
                request: request.clone(),
                content: content.to_string(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let line = serde_json::to_string(&record).expect("cache record serializes");
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every entry and delete the backing file.
    pub fn clear(&self) -> io::Result<()> {
        self.entries.lock().expect("cache lock").clear();
        if let Some(path) = &self.path {
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        let file_bytes = self
            .path
            .as_ref()
            .and_then(|p| fs::metadata(p).ok())
            .map(|m| m.len())
            .unwrap_or(0);
        CacheStats {
            entries: self.len(),
            file_bytes,
            path: self.path.as_ref().map(|p| p.display().to_string()),
        }
    }
}
