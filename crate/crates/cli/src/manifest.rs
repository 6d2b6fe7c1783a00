//! One JSON record per command run.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration, one `key = value` line each.
    pub config: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_s: f64,
    /// SHA-256 over the resolved config and every input file.
    pub input_hash: String,
}

/// Files below `path` in sorted order (the path itself if it is a file).
fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Content hash of the config text and inputs. File names enter relative to
/// their input root so the hash survives moving the data.
pub fn content_hash(config: &str, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    for root in inputs {
        let mut files = Vec::new();
        files_under(root, &mut files).with_context(|| format!("listing {}", root.display()))?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f).with_context(|| format!("hashing {}", f.display()))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
