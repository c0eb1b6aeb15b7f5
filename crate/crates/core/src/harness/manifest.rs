//! Content hashes of run inputs and outputs.

use super::config::SeedRegistry;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "run.json";
/// Wall-clock record; kept out of the manifest so reruns hash alike.
pub const TIMING_FILE: &str = "timing.json";

/// Git-style blob hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// `path` relative to `base` with `/` separators, or the path as given when
/// it lies elsewhere.
pub fn relative_name(path: &Path, base: &Path) -> String {
    let Ok(rel) = path.strip_prefix(base) else {
        return path.display().to_string();
    };
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Every regular file under `dir`, recursively, sorted by relative name.
pub fn list_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            let ft = entry.file_type().map_err(|e| Error::io(&p, e))?;
            if ft.is_dir() {
                stack.push(p);
            } else if ft.is_file() {
                out.push((relative_name(&p, dir), p));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub root_seed: u64,
    pub seeds: SeedRegistry,
    /// Input files relative to the output base directory.
    pub inputs: BTreeMap<String, String>,
    /// Files of the run directory, excluding the manifest and timing record.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("run manifest", format!("{}: {e}", path.display())))
    }
}

/// Hashes of every output file of `run_dir`.
pub fn hash_outputs(run_dir: &Path) -> Result<BTreeMap<String, String>> {
    list_files(run_dir)?
        .into_iter()
        .filter(|(name, _)| name != MANIFEST_FILE && name != TIMING_FILE)
        .map(|(name, p)| Ok((name, file_hash(&p)?)))
        .collect()
}

pub fn hash_inputs(paths: &[PathBuf], base: &Path) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((relative_name(p, base), file_hash(p)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mismatch {
    Missing(String),
    Changed(String),
    Unlisted(String),
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mismatch::Missing(n) => write!(f, "missing: {n}"),
            Mismatch::Changed(n) => write!(f, "hash mismatch: {n}"),
            Mismatch::Unlisted(n) => write!(f, "not in manifest: {n}"),
        }
    }
}

/// Re-hashes a run's outputs and its inputs (relative to the run's parent
/// directory) against `run.json`.
pub fn verify(run_dir: &Path) -> Result<Vec<Mismatch>> {
    let m = RunManifest::load(run_dir)?;
    let base = run_dir.parent().unwrap_or(Path::new("."));
    let mut bad = Vec::new();
    let now = hash_outputs(run_dir)?;
    for (name, h) in &m.outputs {
        match now.get(name) {
            None => bad.push(Mismatch::Missing(name.clone())),
            Some(x) if x != h => bad.push(Mismatch::Changed(name.clone())),
            _ => {}
        }
    }
    bad.extend(
        now.keys()
            .filter(|n| !m.outputs.contains_key(*n))
            .map(|n| Mismatch::Unlisted(n.clone())),
    );
    for (name, h) in &m.inputs {
        let p = if Path::new(name).is_absolute() {
            PathBuf::from(name)
        } else {
            base.join(name)
        };
        if !p.is_file() {
            bad.push(Mismatch::Missing(name.clone()));
        } else if file_hash(&p)? != *h {
            bad.push(Mismatch::Changed(name.clone()));
        }
    }
    Ok(bad)
}
