//! Provenance record written next to the outputs of every subcommand.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<FileHash> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileHash {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub tool_version: String,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Collects inputs while a subcommand runs; `finish` hashes the outputs and
/// writes `<first output>.manifest.json`.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    started: u128,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> ManifestBuilder {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            started: now_ms(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn finish(self, outputs: &[PathBuf]) -> Result<RunManifest> {
        let first = outputs.first().ok_or_else(|| Error::config("a subcommand must produce an output"))?;
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| FileHash::of(p)).collect::<Result<_>>()?,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = manifest_path(first);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    sibling(output, ".manifest.json")
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
