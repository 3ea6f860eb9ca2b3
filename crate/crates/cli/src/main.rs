// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use belief_geometry::pipeline::{self, exit_code, import_dump, PipelineConfig, RunOptions, StageOutcome, Target};
use clap::{Parser, Subcommand};

/// Finds and tests simplex-shaped belief geometries in a toy transformer.
#[derive(Debug, Parser)]
#[command(name = "bgeo", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run one stage (gen-data, train-lm, capture, train-sae, cluster, aanet,
    /// validate, steer, report) or `all`.
    Run {
        target: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides BGEO_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip stages whose recorded outputs match this config.
        #[arg(long)]
        resume: bool,
    },
    /// Write the default configuration.
    InitConfig {
        #[arg(default_value = "bgeo.toml")]
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the shape and metadata of an activation dump.
    InspectDump { path: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Run { target, config, seed, out, resume } => {
            let target: Target = target.parse()?;
            let cfg = pipeline::load_config(config.as_deref())?;
            let done = pipeline::run(target, cfg, &RunOptions { seed, out, resume })?;
            for (stage, outcome) in done {
                let what = match outcome {
                    StageOutcome::Ran => "done",
                    StageOutcome::Skipped => "up to date",
                };
                println!("{stage}: {what}");
            }
        }
        Cmd::InitConfig { path, force } => {
            if path.exists() && !force {
                anyhow::bail!("{} exists; pass --force to overwrite", path.display());
            }
            let text = PipelineConfig::default().to_toml()?;
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Cmd::InspectDump { path } => {
            let d = import_dump(&path)?;
            println!("shape {:?}", d.shape);
            match &d.meta {
                Some(m) => println!("metadata: {} rows, beliefs {}", m.positions.len(), if m.beliefs.is_some() { "present" } else { "absent" }),
                None => println!("metadata: none"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<belief_geometry::Error>().map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
