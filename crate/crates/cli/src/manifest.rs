//! Run manifests: what was run, with which settings and on which inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::{CliResult, MANIFEST_FILE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    /// Git-style SHA-256: a file hashes as `blob <len>\0<bytes>`, a
    /// directory as the sorted list of its files' hashes and relative paths.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    /// Hash over all input hashes.
    pub input_hash: String,
    pub started: String,
    pub finished: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file or directory tree. Manifests inside a tree are skipped
/// since they carry timestamps.
pub fn content_hash(path: &Path) -> CliResult<String> {
    if path.is_file() {
        return Ok(blob_hash(&fs::read(path)?));
    }
    let mut lines = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| crate::CliError::Runtime(e.to_string()))?;
        if !entry.file_type().is_file() || entry.file_name() == MANIFEST_FILE {
            continue;
        }
        let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
        let rel = rel.to_string_lossy().replace('\\', "/");
        lines.push(format!("{} {rel}\n", blob_hash(&fs::read(entry.path())?)));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", lines.len()));
    for l in &lines {
        h.update(l);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: Value::Null,
            seed: 0,
            inputs: Vec::new(),
            input_hash: String::new(),
            started: now(),
            finished: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256: content_hash(path)?,
        });
        Ok(())
    }

    /// Stamps the manifest and writes it to `path`.
    pub fn finish(mut self, seed: u64, config: Value, path: impl AsRef<Path>) -> CliResult<()> {
        self.seed = seed;
        self.config = config;
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(&i.sha256);
            h.update(b"\n");
        }
        self.input_hash = hex::encode(h.finalize());
        self.finished = now();
        fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}
