//! Run manifests written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mdcons::io;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Not covered by the determinism guarantee.
    pub wall_clock_seconds: f64,
}

fn digest(path: &Path) -> mdcons::Result<FileDigest> {
    let bytes = std::fs::read(path)?;
    Ok(FileDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Collects inputs and outputs of one command, then writes the manifest.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `contents` atomically and records the file.
    pub fn write(&mut self, path: &Path, contents: &str) -> mdcons::Result<()> {
        io::write_atomic(path, contents.as_bytes())?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(self, path: &Path) -> mdcons::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<mdcons::Result<_>>()?,
            outputs: self.outputs.iter().map(|p| digest(p)).collect::<mdcons::Result<_>>()?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        io::write_atomic(path, io::to_json(&manifest)?.as_bytes())
    }
}

/// `out.json` -> `out.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

/// File name of the manifest belonging to `out`, as stored in output
/// metadata.
pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}
