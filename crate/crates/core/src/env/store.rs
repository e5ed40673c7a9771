//! Line-delimited JSON persistence.
//!
//! Every record carries a `schema_version` and the fields of the wrapped
//! value in declaration order, so a fixed seed yields byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Instruction, Trajectory};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct RecordRef<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    value: &'a T,
}

#[derive(Deserialize)]
struct Record<T> {
    schema_version: u32,
    #[serde(flatten)]
    value: T,
}

/// Writes one versioned record per line.
pub fn write_jsonl<'a, T, I>(path: &Path, items: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = Vec::new();
    for value in items {
        serde_json::to_writer(
            &mut out,
            &RecordRef {
                schema_version: SCHEMA_VERSION,
                value,
            },
        )?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Appends one versioned record and syncs the file.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(&RecordRef {
        schema_version: SCHEMA_VERSION,
        value,
    })?;
    line.push(b'\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_all()?;
    Ok(())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record<T> = serde_json::from_str(&line).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {}: {e}", i + 1))
        })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "line {}: schema_version {} (expected {SCHEMA_VERSION})",
                    i + 1,
                    record.schema_version
                ),
            ));
        }
        out.push(record.value);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    write_jsonl(path, trajectories)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    read_jsonl(path)
}

pub fn write_instructions(path: &Path, tasks: &[Instruction]) -> Result<()> {
    write_jsonl(path, tasks)
}

pub fn read_instructions(path: &Path) -> Result<Vec<Instruction>> {
    read_jsonl(path)
}
