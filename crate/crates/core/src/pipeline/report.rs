// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tables and per-figure numeric data merged from every upstream stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::stages::{
    load_lm_report, load_recovery_report, load_simplex_report, load_steering, load_validation, CandidateKind, Ctx,
};
use super::Stage;
use crate::io::write_atomic;
use crate::validation::PIE_ACTIVE_SHARE;
use crate::Result;

pub const TOY_R2: &str = "report/toy_r2.csv";
pub const RECOVERY_GRID: &str = "report/recovery_grid.csv";
pub const ELBOW_CURVES: &str = "report/elbow_curves.csv";
pub const TABLE_BARY: &str = "report/table_bary.csv";
pub const FULL_RESULTS: &str = "report/full_results.csv";
pub const PIE_SHARES: &str = "report/pie_shares.csv";
pub const STEERING_CSV: &str = "report/steering.csv";
pub const SUMMARY: &str = "report/summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub lm_accuracy: f64,
    pub lm_untrained_accuracy: f64,
    pub chance: f64,
    pub layer: usize,
    pub sae_k: usize,
    pub recovered: bool,
    pub mean_r2: Option<f64>,
    pub real_screened: usize,
    pub real_passing: usize,
    pub null_screened: usize,
    pub null_passing: usize,
    pub mean_steering: Option<f64>,
    pub mean_control: Option<f64>,
}

fn f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn e(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>, fmt: fn(f64) -> String) -> String {
    v.map(fmt).unwrap_or_default()
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Self { w })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<()> {
        self.w.write_record(fields.into_iter().collect::<Vec<_>>())?;
        Ok(())
    }

    fn write(self, ctx: &Ctx, rel: &str, outs: &mut Vec<PathBuf>) -> Result<()> {
        let bytes = self.w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        let path = ctx.path(rel);
        write_atomic(&path, &bytes)?;
        outs.push(path);
        Ok(())
    }
}

fn kind(k: CandidateKind) -> String {
    match k {
        CandidateKind::Real => "real".into(),
        CandidateKind::Null => "null".into(),
    }
}

pub fn report(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    for s in [Stage::GenData, Stage::TrainLm, Stage::Capture, Stage::TrainSae, Stage::Cluster, Stage::Aanet, Stage::Validate, Stage::Steer] {
        ctx.require(s)?;
    }
    let lm = load_lm_report(ctx)?;
    let rec = load_recovery_report(ctx)?;
    let simplex = load_simplex_report(ctx)?;
    let validation = load_validation(ctx)?;
    let steering = load_steering(ctx)?;
    let alpha = ctx.cfg.validation.alpha;
    let name_of = |c: Option<usize>| c.and_then(|c| rec.components.get(c)).cloned().unwrap_or_default();
    let mut outs = Vec::new();

    let chosen = rec.chosen();
    let mut t = Table::new(&["cluster", "assigned_component", "r2", "conflict"])?;
    if let Some(r) = &chosen.recovery {
        for (c, a) in r.assignment.iter().enumerate() {
            let rep = a.is_some_and(|k| r.representative[k] == Some(c));
            let conflict = a.is_some_and(|k| r.conflicts.iter().any(|(ck, _)| *ck == k));
            let (label, r2) = match a {
                Some(k) if rep => (name_of(Some(*k)), opt(r.r2[c][*k], f)),
                _ => ("(noise)".into(), String::new()),
            };
            t.row([c.to_string(), label, r2, conflict.to_string()])?;
        }
        t.row(["mean".into(), "assigned clusters".into(), opt(r.mean_r2, f), (!r.conflicts.is_empty()).to_string()])?;
    }
    t.write(ctx, TOY_R2, &mut outs)?;

    let mut t = Table::new(&["layer", "sae_k", "recovered", "conflicts", "mean_r2", "success", "iterations", "converged"])?;
    for s in &rec.settings {
        let (n, conf, mean) = s.recovery.as_ref().map_or((0, 0, None), |r| (r.n_recovered(), r.conflicts.len(), r.mean_r2));
        t.row([s.layer.to_string(), s.k.to_string(), n.to_string(), conf.to_string(), opt(mean, f), s.success.to_string(), s.iterations.to_string(), s.converged.to_string()])?;
    }
    t.write(ctx, RECOVERY_GRID, &mut outs)?;

    let mut t = Table::new(&["candidate", "kind", "K", "loss", "chosen_k", "peak"])?;
    for c in &simplex.candidates {
        let Some(curve) = &c.curve else { continue };
        for (k, l) in curve.ks.iter().zip(&curve.losses) {
            t.row([c.name.clone(), kind(c.kind), k.to_string(), opt(*l, e), curve.chosen.map(|k| k.to_string()).unwrap_or_default(), f(curve.peak)])?;
        }
    }
    t.write(ctx, ELBOW_CURVES, &mut outs)?;

    let mut t = Table::new(&["candidate", "kind", "split", "n_rows", "frac_wins", "p", "significant", "error"])?;
    for v in &validation {
        for (split, test) in [("near_vertex", &v.near_vertex), ("interior", &v.interior)] {
            t.row([
                v.name.clone(),
                kind(v.kind),
                split.into(),
                test.result.as_ref().map(|r| r.n_rows.to_string()).unwrap_or_default(),
                opt(test.frac_wins(), f),
                opt(test.p(), e),
                test.passes(alpha).to_string(),
                test.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    t.write(ctx, TABLE_BARY, &mut outs)?;

    let mut t = Table::new(&[
        "candidate", "kind", "m", "K", "component", "kl_ratio", "nv_wins", "nv_p", "si_wins", "si_p", "bary_pass", "bary_r2", "steering", "control",
    ])?;
    for v in &validation {
        let st = steering.iter().find(|s| s.name == v.name).and_then(|s| s.result.as_ref());
        let br2 = v.bary_r2.as_ref().and_then(|r| v.component.and_then(|c| r[c]));
        t.row([
            v.name.clone(),
            kind(v.kind),
            v.members.len().to_string(),
            v.k.to_string(),
            name_of(v.component),
            opt(v.kl.as_ref().map(|k| k.ratio), f),
            opt(v.near_vertex.frac_wins(), f),
            opt(v.near_vertex.p(), e),
            opt(v.interior.frac_wins(), f),
            opt(v.interior.p(), e),
            v.passes.to_string(),
            opt(br2, f),
            opt(st.map(|s| s.score), f),
            opt(st.map(|s| s.control), f),
        ])?;
    }
    t.write(ctx, FULL_RESULTS, &mut outs)?;

    let mut t = Table::new(&["candidate", "kind", "vertex", "latent", "share", "active"])?;
    for v in &validation {
        for (vx, shares) in v.pie.iter().enumerate() {
            for (i, &s) in shares.iter().enumerate() {
                t.row([v.name.clone(), kind(v.kind), vx.to_string(), v.members[i].to_string(), f(s), (s >= PIE_ACTIVE_SHARE).to_string()])?;
            }
        }
    }
    t.write(ctx, PIE_SHARES, &mut outs)?;

    let mut t = Table::new(&["candidate", "component", "source", "target", "mode", "scale", "successes", "trials", "rate"])?;
    for s in &steering {
        let Some(r) = &s.result else { continue };
        for p in &r.pairs {
            t.row([
                s.name.clone(),
                name_of(Some(s.component)),
                p.source.to_string(),
                p.target.to_string(),
                p.mode.name().into(),
                f(p.scale as f64),
                p.successes.to_string(),
                p.trials.to_string(),
                f(p.rate()),
            ])?;
        }
    }
    t.write(ctx, STEERING_CSV, &mut outs)?;

    let screened = |k: CandidateKind| validation.iter().filter(|v| v.kind == k).count();
    let passing = |k: CandidateKind| validation.iter().filter(|v| v.kind == k && v.passes).count();
    let scored: Vec<(f64, f64)> = steering.iter().filter_map(|s| s.result.as_ref().map(|r| (r.score, r.control))).collect();
    let mean = |g: fn(&(f64, f64)) -> f64| (!scored.is_empty()).then(|| scored.iter().map(g).sum::<f64>() / scored.len() as f64);
    let summary = Summary {
        lm_accuracy: lm.accuracy,
        lm_untrained_accuracy: lm.untrained_accuracy,
        chance: lm.chance,
        layer: chosen.layer,
        sae_k: chosen.k,
        recovered: chosen.success,
        mean_r2: chosen.recovery.as_ref().and_then(|r| r.mean_r2),
        real_screened: screened(CandidateKind::Real),
        real_passing: passing(CandidateKind::Real),
        null_screened: screened(CandidateKind::Null),
        null_passing: passing(CandidateKind::Null),
        mean_steering: mean(|p| p.0),
        mean_control: mean(|p| p.1),
    };
    let path = ctx.path(SUMMARY);
    super::artifact::write_json(&path, &ctx.header(Stage::Report), &summary)?;
    outs.push(path);
    Ok(outs)
}
