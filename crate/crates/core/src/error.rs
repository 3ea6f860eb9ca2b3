// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use belief_nn::NnError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("process construction failed: {0}")]
    SpecConstruction(String),

    #[error("filtering failed: symbol {symbol} has zero probability at step {step}")]
    ImpossibleSymbol { symbol: usize, step: usize },

    #[error("training diverged at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: NnError,
    },

    #[error("numerical failure: {0}")]
    Numerical(#[from] NnError),

    #[error("seeding failed: requested {requested} seeds but the direction matrix has rank {rank}")]
    Seeding { requested: usize, rank: usize },

    #[error("fitting failed: {0}")]
    Fitting(String),

    #[error("sweep failed: only {valid} valid points, need at least 3")]
    Sweep { valid: usize },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("corrupt payload in {path}: expected {expected} bytes, found {actual}")]
    Corrupt { path: PathBuf, expected: u64, actual: u64 },

    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config hash mismatch: artifact has {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
