//! Run manifests: one `manifest.json` per artifact directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    /// SHA-256 of `"blob <len>\0"` followed by the file bytes.
    pub blob_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector as invoked.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    /// Hash over the sorted input blob hashes.
    pub input_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn hash_inputs(paths: &[PathBuf]) -> Result<(Vec<InputFile>, String), CliError> {
    let mut inputs = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
        inputs.push(InputFile {
            path: p.clone(),
            blob_hash: blob_hash(&bytes),
        });
    }
    let mut hashes: Vec<&str> = inputs.iter().map(|i| i.blob_hash.as_str()).collect();
    hashes.sort_unstable();
    let mut h = Sha256::new();
    for x in hashes {
        h.update(x.as_bytes());
        h.update(b"\n");
    }
    Ok((inputs, hex(&h.finalize())))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(adapref::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(adapref::Error::from)?)
    }
}
