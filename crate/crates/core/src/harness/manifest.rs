//! Run manifest: artifact checksums, config snapshot and stage timings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<FileRecord>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_FILE {
            continue;
        }
        out.push(FileRecord {
            bytes: e.metadata()?.len(),
            sha256: sha256_file(&path)?,
            path: rel,
        });
    }
    Ok(())
}

/// Every file under `dir` except the manifest itself, sorted by path.
pub fn collect_files(dir: impl AsRef<Path>) -> Result<Vec<FileRecord>> {
    let mut out = Vec::new();
    walk(dir.as_ref(), dir.as_ref(), &mut out)?;
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::write(
            dir.as_ref().join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.as_ref().join(MANIFEST_FILE),
        )?)?)
    }

    /// Copy with every stage duration zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.stages.iter_mut().for_each(|s| s.seconds = 0.0);
        m
    }

    /// Files whose current checksum differs from the record, plus files on
    /// disk the manifest does not list.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let current = collect_files(dir)?;
        let mut bad: Vec<String> = current
            .iter()
            .filter(|f| !self.files.contains(f))
            .map(|f| f.path.clone())
            .collect();
        bad.extend(
            self.files
                .iter()
                .filter(|f| !current.iter().any(|c| c.path == f.path))
                .map(|f| f.path.clone()),
        );
        Ok(bad)
    }
}
