//! Run manifests: what was run, on which inputs, producing which outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::output::write_json;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub bytes: u64,
    /// `sha256:` of the git blob encoding, `"blob <len>\0" + contents`.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn blob_hash(contents: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", contents.len()).as_bytes());
    h.update(contents);
    format!("sha256:{}", hex::encode(h.finalize()))
}

pub fn file_record(path: &Path) -> Result<FileRecord> {
    let data = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileRecord {
        path: path.to_path_buf(),
        bytes: data.len() as u64,
        hash: blob_hash(&data),
    })
}

/// `<dir>/manifest.json` for directory outputs, `<stem>.manifest.json`
/// beside a single output file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        out.with_extension("manifest.json")
    }
}

/// Collects the manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started_at: String,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    /// Hashes inputs and `outputs` and writes the manifest to `path`.
    pub fn finish(self, outputs: &[PathBuf], path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "scs-supcon".to_string(),
            tool_version: TOOL_VERSION.to_string(),
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?,
            started_at: self.started_at,
            finished_at: now(),
        };
        write_json(path, &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_format() {
        // sha256 of "blob 6\0hello\n", computed independently.
        assert_eq!(
            blob_hash(b"hello\n"),
            "sha256:2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.csv");
        fs::write(&out, "x\n").unwrap();
        let mpath = manifest_path(&out, false);
        assert_eq!(mpath, dir.path().join("a.manifest.json"));
        let m = ManifestBuilder::start("generate").seed(3).finish(std::slice::from_ref(&out), &mpath).unwrap();
        assert_eq!(m.outputs[0].hash, blob_hash(b"x\n"));
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
