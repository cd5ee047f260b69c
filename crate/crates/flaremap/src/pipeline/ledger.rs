//! Run ledger (JSON Lines, one entry per completed stage) and the lock file
//! that serializes runs over an output directory.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// One completed stage: what it read, what it wrote, what it counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub wall_ms: u64,
    pub config_hash: String,
}

pub fn ledger_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ledger.jsonl")
}

pub fn append_entry(out_dir: &Path, entry: &LedgerEntry) -> Result<(), PipelineError> {
    let path = ledger_path(out_dir);
    let line = serde_json::to_string(entry)
        .map_err(|e| PipelineError::Internal(format!("ledger serialization: {e}")))?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| PipelineError::Internal(format!("cannot open {}: {e}", path.display())))?;
    writeln!(file, "{line}")
        .map_err(|e| PipelineError::Internal(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_ledger(out_dir: &Path) -> Result<Vec<LedgerEntry>, PipelineError> {
    let path = ledger_path(out_dir);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PipelineError::Internal(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(line).map_err(|e| {
            PipelineError::Internal(format!("{} line {}: {e}", path.display(), index + 1))
        })?);
    }
    Ok(entries)
}

/// Exclusive lock over an output directory, released on drop. Creation is
/// atomic (`create_new`), so two concurrent runs cannot both hold it. A
/// crash can leave the file behind; the error message tells the user what
/// to delete after checking no other run is live.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard, PipelineError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| PipelineError::Internal(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Config(format!(
                "another run holds {}; if no other run is active, delete the file and retry",
                path.display()
            ))),
            Err(e) => Err(PipelineError::Internal(format!(
                "cannot create lock {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_append_in_order_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for stage in ["ingest", "cluster"] {
            let entry = LedgerEntry {
                stage: stage.to_string(),
                inputs: vec!["a.csv".to_string()],
                outputs: vec!["b.csv".to_string()],
                counts: BTreeMap::from([("rows".to_string(), 5)]),
                wall_ms: 12,
                config_hash: "deadbeef".to_string(),
            };
            append_entry(dir.path(), &entry).unwrap();
        }
        let entries = read_ledger(dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].stage, "ingest");
        assert_eq!(entries[1].stage, "cluster");
        assert_eq!(entries[0].counts["rows"], 5);
    }

    #[test]
    fn lock_excludes_second_holder_and_releases_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let first = LockGuard::acquire(dir.path()).unwrap();
        let second = LockGuard::acquire(dir.path());
        assert!(matches!(second, Err(PipelineError::Config(_))));
        drop(first);
        let third = LockGuard::acquire(dir.path());
        assert!(third.is_ok());
    }
}
