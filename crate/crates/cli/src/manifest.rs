//! Run manifests: what a command was asked to do and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hashes of the given files; directories contribute every regular file
/// below them, in sorted order.
pub fn hash_paths(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    files
        .into_iter()
        .filter(|f| f.file_name().is_none_or(|n| n != MANIFEST_FILE))
        .map(|path| {
            Ok(FileHash {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect()
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            collect_files(&entry?.path(), out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunManifest {
    /// Writes `manifest.json` into `dir`, or next to `dir` when it is a file.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = if out.is_dir() {
            out.join(MANIFEST_FILE)
        } else {
            let name = format!(
                "{}.{MANIFEST_FILE}",
                out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
            );
            out.with_file_name(name)
        };
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
