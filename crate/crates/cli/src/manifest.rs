//! Run manifests: what a command was asked to do and what it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the canonical config text.
    pub config_sha256: String,
    pub config: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
    /// Emitted path (relative to the output directory) to SHA-256. A
    /// directory entry ends in `/` and digests its whole tree.
    pub files: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Digest over every file below `dir`: sorted relative paths and contents.
pub fn tree_digest(dir: &Path) -> Result<String, CliError> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            counts: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    /// Records `rel` (a file or a directory) below `out`.
    pub fn add(&mut self, out: &Path, rel: &str) -> Result<(), CliError> {
        let path = out.join(rel.trim_end_matches('/'));
        if path.is_dir() {
            self.files.insert(format!("{}/", rel.trim_end_matches('/')), tree_digest(&path)?);
        } else {
            self.files.insert(rel.into(), file_digest(&path)?);
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
