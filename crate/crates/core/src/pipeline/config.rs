// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aanet::AanetConfig;
use crate::clustering::ClusterConfig;
use crate::processes::{mess3, tom_quantum_spec, CompositeSpec, Mess3Convention};
use crate::sae::{SaeConfig, K_GRID};
use crate::transformer::LmConfig;
use crate::validation::{BaryConfig, SplitConfig, SteeringConfig};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the configured output root.
pub const OUT_ENV: &str = "BGEO_OUT";

/// Components of the multipartite process, in token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessConfig {
    pub mess3_convention: Mess3Convention,
    /// `(alpha, beta)` per Bloch-walk component.
    pub tom_quantum: Vec<[f64; 2]>,
    /// `(x, a)` per Mess3 component.
    pub mess3: Vec<[f64; 2]>,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            mess3_convention: Mess3Convention::Standard,
            tom_quantum: vec![[1.51, 3.07], [1.99, 2.51]],
            mess3: vec![[0.05, 0.85], [0.075, 0.90], [0.10, 0.95]],
        }
    }
}

fn suffixed(base: &str, i: usize) -> String {
    if i == 0 {
        base.to_string()
    } else {
        format!("{base}_{i}")
    }
}

impl ProcessConfig {
    pub fn build(&self) -> Result<CompositeSpec> {
        let mut comps = Vec::new();
        for (i, [a, b]) in self.tom_quantum.iter().enumerate() {
            let mut s = tom_quantum_spec(*a, *b)?;
            s.name = suffixed("tom_quantum", i);
            comps.push(s);
        }
        for (i, [x, a]) in self.mess3.iter().enumerate() {
            let mut s = mess3(*x, *a, self.mess3_convention)?;
            s.name = suffixed("mess3", i);
            comps.push(s);
        }
        CompositeSpec::compose(comps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Sequences whose residuals are captured.
    pub capture_sequences: usize,
    /// Captured sequence length; at most the context length.
    pub sequence_length: usize,
    /// Fresh sequences for held-out accuracy.
    pub eval_sequences: usize,
    /// External activation dump analyzed instead of captured residuals.
    pub import_dump: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { capture_sequences: 3000, sequence_length: 16, eval_sequences: 2048, import_dump: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { layers: vec![0, 1, 2], ks: K_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexConfig {
    #[serde(flatten)]
    pub aanet: AanetConfig,
    /// Principal coordinates of a cluster reconstruction kept for fitting.
    pub max_dim: usize,
    /// Random partitions drawn for null clusters.
    pub null_attempts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self { aanet: AanetConfig { ks: vec![2, 3, 4, 5], ..AanetConfig::default() }, max_dim: 16, null_attempts: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub split: SplitConfig,
    pub bary: BaryConfig,
    /// Significance level for a split to pass.
    pub alpha: f64,
    pub kl_pairs: usize,
    pub recovery_ridge: f64,
    /// Every `heldout_every`-th capture sequence is held out for recovery R².
    pub heldout_every: usize,
    /// Mean representative R² a grid setting needs to count as recovered.
    pub min_mean_r2: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            bary: BaryConfig::default(),
            alpha: 1e-3,
            kl_pairs: 10_000,
            recovery_ridge: 1e-6,
            heldout_every: 5,
            min_mean_r2: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Output directory; overridden by `BGEO_OUT` and then by the CLI.
    pub output_root: PathBuf,
    pub process: ProcessConfig,
    pub data: DataConfig,
    pub lm: LmConfig,
    pub sae: SaeConfig,
    pub grid: GridConfig,
    pub cluster: ClusterConfig,
    pub simplex: SimplexConfig,
    pub validation: ValidationConfig,
    pub steering: SteeringConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            output_root: PathBuf::from("runs/default"),
            process: ProcessConfig::default(),
            data: DataConfig::default(),
            lm: LmConfig::default(),
            sae: SaeConfig::default(),
            grid: GridConfig::default(),
            cluster: ClusterConfig::default(),
            simplex: SimplexConfig::default(),
            validation: ValidationConfig::default(),
            steering: SteeringConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let version = raw.get("schema_version").and_then(toml::Value::as_integer);
        match version {
            Some(v) if v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("schema version {v} is not supported (expected {SCHEMA_VERSION})"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let cfg: Self = raw.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.data.sequence_length == 0 || self.data.sequence_length > self.lm.context_length {
            return Err(Error::Config(format!(
                "sequence_length {} must be in 1..={}",
                self.data.sequence_length, self.lm.context_length
            )));
        }
        if self.data.capture_sequences == 0 {
            return Err(Error::Config("capture_sequences must be positive".into()));
        }
        if self.grid.layers.is_empty() || self.grid.ks.is_empty() {
            return Err(Error::Config("empty SAE grid".into()));
        }
        if let Some(&l) = self.grid.layers.iter().find(|&&l| l >= self.lm.n_layers) {
            return Err(Error::Config(format!("grid layer {l} out of range")));
        }
        if self.grid.ks.iter().any(|&k| k == 0 || k > self.sae.d_sae) {
            return Err(Error::Config("grid k must be in 1..=d_sae".into()));
        }
        if self.data.import_dump.is_some() && self.grid.layers.len() != 1 {
            return Err(Error::Config("an imported dump needs exactly one grid layer".into()));
        }
        if self.validation.heldout_every < 2 {
            return Err(Error::Config("heldout_every must be at least 2".into()));
        }
        if self.simplex.max_dim == 0 {
            return Err(Error::Config("max_dim must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, excluding the output root.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_root = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let d = Sha256::digest(&json);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Output root: explicit flag, then `BGEO_OUT`, then the config value.
pub fn resolve_output_root(cfg: &PipelineConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_root.clone(),
    }
}
