// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage orchestration over a single output directory.
//!
//! Each stage writes its artifacts atomically and finishes by recording a
//! manifest (`stages/<stage>.json`) with the provenance header and the
//! SHA-256 of every output. Downstream stages require those manifests.

pub mod artifact;
pub mod config;
pub mod dump;
mod report;
pub mod stages;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use artifact::{ArtifactHeader, OutputLock, TOOL_VERSION};
pub use config::{resolve_output_root, PipelineConfig, OUT_ENV, SCHEMA_VERSION};
pub use dump::{import_dump, ActivationDump, DumpMeta};
pub use report::Summary;
pub use stages::Ctx;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainLm,
    Capture,
    TrainSae,
    Cluster,
    Aanet,
    Validate,
    Steer,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainLm,
        Stage::Capture,
        Stage::TrainSae,
        Stage::Cluster,
        Stage::Aanet,
        Stage::Validate,
        Stage::Steer,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainLm => "train-lm",
            Stage::Capture => "capture",
            Stage::TrainSae => "train-sae",
            Stage::Cluster => "cluster",
            Stage::Aanet => "aanet",
            Stage::Validate => "validate",
            Stage::Steer => "steer",
            Stage::Report => "report",
        }
    }

    fn execute(self, ctx: &Ctx) -> Result<Vec<PathBuf>> {
        match self {
            Stage::GenData => stages::gen_data(ctx),
            Stage::TrainLm => stages::train_lm(ctx),
            Stage::Capture => stages::capture(ctx),
            Stage::TrainSae => stages::train_sae_stage(ctx),
            Stage::Cluster => stages::cluster(ctx),
            Stage::Aanet => stages::aanet(ctx),
            Stage::Validate => stages::validate(ctx),
            Stage::Steer => stages::steer(ctx),
            Stage::Report => report::report(ctx),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to run: one stage or every stage in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Stage(Stage),
    All,
}

impl Target {
    /// Stages to run; with an imported dump the data and model stages drop out.
    fn stages(self, importing: bool) -> Vec<Stage> {
        match self {
            Target::Stage(s) => vec![s],
            Target::All if importing => vec![Stage::Capture, Stage::TrainSae, Stage::Cluster, Stage::Aanet],
            Target::All => Stage::ALL.to_vec(),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Target::All)
        } else {
            s.parse().map(Target::Stage)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the configured root seed.
    pub seed: Option<u64>,
    /// Output root; takes precedence over `BGEO_OUT` and the config.
    pub out: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Exit status for a failed run: 2 for a missing upstream artifact, 3 for a
/// configuration mismatch, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingArtifact(_) => 2,
        Error::ConfigMismatch { .. } => 3,
        _ => 1,
    }
}

/// A completed stage whose manifest matches this config can be skipped.
fn completed(ctx: &Ctx, stage: Stage) -> Result<bool> {
    let path = artifact::manifest_path(&ctx.root, stage.name());
    if !path.exists() {
        return Ok(false);
    }
    let m = artifact::require_stage(&ctx.root, &ctx.header(stage), stage.name())?;
    for o in &m.outputs {
        if artifact::sha256_file(&ctx.root.join(&o.path))? != o.sha256 {
            log::warn!("{stage}: {} changed since the stage completed; rerunning", o.path.display());
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn run_stage(ctx: &Ctx, stage: Stage, resume: bool) -> Result<StageOutcome> {
    if resume && completed(ctx, stage)? {
        log::info!("{stage}: up to date");
        return Ok(StageOutcome::Skipped);
    }
    log::info!("{stage}: running");
    let start = std::time::Instant::now();
    let outs = stage.execute(ctx)?;
    artifact::write_manifest(&ctx.root, &ctx.header(stage), &outs, start.elapsed().as_secs_f64())?;
    Ok(StageOutcome::Ran)
}

/// Runs `target` under `cfg`, holding the output directory lock throughout.
pub fn run(target: Target, mut cfg: PipelineConfig, opts: &RunOptions) -> Result<Vec<(Stage, StageOutcome)>> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let root = resolve_output_root(&cfg, opts.out.as_deref());
    let ctx = Ctx::new(cfg, root);
    let _lock = OutputLock::acquire(&ctx.root)?;
    let mut done = Vec::new();
    for stage in target.stages(ctx.cfg.data.import_dump.is_some()) {
        done.push((stage, run_stage(&ctx, stage, opts.resume)?));
    }
    Ok(done)
}

/// Loads a config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}
