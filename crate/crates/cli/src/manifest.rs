//! Per-command manifest: settings echo, input hashes and artifact list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ace_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hash of `bytes` framed like a git blob object, with sha256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct InputHash {
    pub role: String,
    pub hash: String,
}

/// Everything a command consumed and produced.
///
/// Paths are kept relative to the output directory and input files are
/// identified by content only, so reruns on equal inputs write equal files.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    pub input_hash: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: Vec<InputHash>,
    out: PathBuf,
    artifacts: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, out: &Path) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed: None,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            out: out.to_path_buf(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn settings(&mut self, map: BTreeMap<String, String>) {
        self.config.extend(map);
    }

    pub fn input(&mut self, role: &str, bytes: &[u8]) {
        self.inputs.push(InputHash {
            role: role.to_string(),
            hash: blob_hash(bytes),
        });
    }

    /// Records a file already written under the output directory.
    pub fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path);
        self.artifacts
            .push(rel.to_string_lossy().replace('\\', "/"));
    }

    pub fn finish(self) -> Manifest {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(format!("{} {}\n", i.role, i.hash).as_bytes());
        }
        Manifest {
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            input_hash: hex::encode(h.finalize()),
            artifacts: self.artifacts,
        }
    }

    /// Writes `manifest.json` into the output directory.
    pub fn write(self) -> Result<PathBuf> {
        let path = self.out.join(MANIFEST_FILE);
        let m = self.finish();
        let mut text = serde_json::to_string_pretty(&m)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
