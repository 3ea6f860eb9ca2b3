// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact headers, stage manifests and the output-directory lock.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::write_atomic;
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub tool_version: String,
}

impl ArtifactHeader {
    pub fn new(config_hash: &str, seed: u64, stage: &str) -> Self {
        Self { config_hash: config_hash.into(), seed, stage: stage.into(), tool_version: TOOL_VERSION.into() }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("header serializes")
    }

    /// Errors unless `other` was produced under the same config and seed.
    pub fn check(&self, other: &ArtifactHeader) -> Result<()> {
        if self.config_hash != other.config_hash || self.seed != other.seed {
            return Err(Error::ConfigMismatch {
                expected: format!("{} (seed {})", self.config_hash, self.seed),
                found: format!("{} (seed {})", other.config_hash, other.seed),
            });
        }
        Ok(())
    }
}

/// A JSON artifact: header plus body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub header: ArtifactHeader,
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, header: &ArtifactHeader, body: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&Envelope { header: header.clone(), body })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads a JSON artifact and checks its header against `expected`.
pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &ArtifactHeader) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    expected.check(&env.header)?;
    Ok(env.body)
}

/// Checks the provenance stored in a checkpoint's JSON metadata.
pub fn check_meta(path: &Path, meta: &serde_json::Value, expected: &ArtifactHeader) -> Result<()> {
    let header: ArtifactHeader = serde_json::from_value(meta.get("artifact").cloned().unwrap_or_default())
        .map_err(|_| Error::Format { path: path.to_path_buf(), msg: "checkpoint lacks an artifact header".into() })?;
    expected.check(&header)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output root.
    pub path: PathBuf,
    pub sha256: String,
}

/// Completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub outputs: Vec<OutputFile>,
    /// Wall-clock seconds the stage took.
    #[serde(default)]
    pub elapsed_secs: f64,
}

pub fn manifest_path(root: &Path, stage: &str) -> PathBuf {
    root.join("stages").join(format!("{stage}.json"))
}

pub fn write_manifest(root: &Path, header: &ArtifactHeader, files: &[PathBuf], elapsed_secs: f64) -> Result<()> {
    let mut outputs = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f).to_path_buf();
        outputs.push(OutputFile { sha256: sha256_file(f)?, path: rel });
    }
    write_json(&manifest_path(root, &header.stage), header, &Manifest { outputs, elapsed_secs })
}

/// Loads a stage manifest, checking provenance and that every output exists.
pub fn require_stage(root: &Path, expected: &ArtifactHeader, stage: &str) -> Result<Manifest> {
    let path = manifest_path(root, stage);
    let mut want = expected.clone();
    want.stage = stage.into();
    let m: Manifest = read_json(&path, &want)?;
    for o in &m.outputs {
        let p = root.join(&o.path);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
    }
    Ok(m)
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Config(format!("{} is locked by process {}; remove {} if stale", root.display(), owner.trim(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
