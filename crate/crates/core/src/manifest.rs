//! Run-directory bookkeeping: an append-only manifest of content hashes and
//! a lock file that gives one process ownership of the directory.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::store::{append_jsonl, read_jsonl, sha256_file, sha256_hex};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LOCK_FILE: &str = "run.lock";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Artifact category: `tool`, `config`, `dataset`, `experts`, `checkpoint`, ...
    pub kind: String,
    /// Path relative to the run directory; empty for the tool entry.
    pub path: String,
    pub sha256: String,
    /// Seconds since the Unix epoch when the entry was appended.
    pub recorded_at: u64,
}

pub struct Manifest {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl Manifest {
    /// Opens the run's manifest, or an empty one for a fresh directory.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let entries = if path.exists() {
            read_jsonl(&path)?
        } else {
            Vec::new()
        };
        Ok(Manifest {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.path == path)
    }

    fn append(&mut self, entry: ManifestEntry) -> Result<()> {
        append_jsonl(&self.dir.join(MANIFEST_FILE), &entry)?;
        self.entries.push(entry);
        Ok(())
    }

    /// Records the hash of a file under the run directory.
    pub fn record(&mut self, kind: &str, rel: &str) -> Result<String> {
        let sha256 = sha256_file(&self.dir.join(rel))?;
        self.append(ManifestEntry {
            kind: kind.to_string(),
            path: rel.to_string(),
            sha256: sha256.clone(),
            recorded_at: now(),
        })?;
        Ok(sha256)
    }

    pub fn record_tool(&mut self) -> Result<()> {
        self.append(ManifestEntry {
            kind: "tool".into(),
            path: String::new(),
            sha256: sha256_hex(TOOL_VERSION.as_bytes()),
            recorded_at: now(),
        })
    }

    /// Re-hashes every recorded file and refuses on any mismatch.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            if e.kind == "tool" {
                let found = sha256_hex(TOOL_VERSION.as_bytes());
                if found != e.sha256 {
                    return Err(Error::Integrity {
                        path: "<tool version>".into(),
                        expected: e.sha256.clone(),
                        found,
                    });
                }
                continue;
            }
            if self.get(&e.path) != Some(e) {
                // Superseded by a later entry for the same path.
                continue;
            }
            let p = self.dir.join(&e.path);
            let found = if p.exists() {
                sha256_file(&p)?
            } else {
                "missing".to_string()
            };
            if found != e.sha256 {
                return Err(Error::Integrity {
                    path: e.path.clone(),
                    expected: e.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
