// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use belief_nn::Tensor;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::artifact::{check_meta, read_json, require_stage, write_json, ArtifactHeader};
use super::config::PipelineConfig;
use super::dump::{import_dump, ActivationDump};
use super::Stage;
use crate::aanet::{sweep_k, AanetConfig, ElbowCurve, SimplexFit};
use crate::clustering::{k_subspace, make_null_clusters, rank_screen, read_cluster_files, write_cluster_files, ClusterSet, Init};
use crate::linalg::{principal_axes, to_matrix};
use crate::processes::{CompositeSpec, ProcessKind};
use crate::rng::derive_seed;
use crate::sae::{train_sae, SaeConfig, SaeModel};
use crate::transformer::{accuracy_on, capture_residual, train_lm_with, Lm};
use crate::validation::{
    bary_advantage, kl_ratio, latent_vertex_shares, recovery_r2, split_samples, steering_score, BaryAdvantageResult, KlResult,
    RecoveryResult, SampleSplit, SteeringResult, SteeringTarget,
};
use crate::{Error, Result};

/// Eigenvalues below this fraction of the largest are dropped before fitting.
const PCA_REL_TOL: f64 = 1e-8;

/// Shared state of one pipeline invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, root: PathBuf) -> Self {
        let hash = cfg.hash();
        Self { cfg, root, hash }
    }

    pub fn header(&self, stage: Stage) -> ArtifactHeader {
        ArtifactHeader::new(&self.hash, self.cfg.seed, stage.name())
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        require_stage(&self.root, &self.header(stage), stage.name()).map(|_| ())
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.seed, name)
    }

    fn meta(&self, stage: Stage, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "artifact": self.header(stage), "info": extra })
    }

    fn importing(&self) -> bool {
        self.cfg.data.import_dump.is_some()
    }

    fn spec(&self) -> Result<CompositeSpec> {
        self.cfg.process.build()
    }
}

pub const SEQUENCES: &str = "data/sequences.json";
pub const LM_MODEL: &str = "models/lm.bin";
pub const LM_METRICS: &str = "metrics/lm.json";
pub const SAE_METRICS: &str = "metrics/sae.json";
pub const RECOVERY: &str = "metrics/recovery.json";
pub const SIMPLEX: &str = "simplex/candidates.json";
pub const VALIDATION: &str = "validation/results.json";
pub const STEERING: &str = "validation/steering.json";

pub fn dump_rel(layer: usize) -> String {
    format!("acts/layer{layer}.bgad")
}

pub fn sae_rel(layer: usize, k: usize) -> String {
    format!("models/sae/l{layer}_k{k}.bin")
}

fn cluster_rel(layer: usize, k: usize) -> (String, String) {
    (format!("clusters/l{layer}_k{k}.tsv"), format!("clusters/l{layer}_k{k}.basis"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequences {
    /// Sequences whose residuals are captured.
    pub capture: Vec<Vec<usize>>,
    /// Sequences of length `context + 1` for next-token accuracy.
    pub eval: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub chance: f64,
    pub untrained_accuracy: f64,
    pub accuracy: f64,
    /// Accuracies on the trainer's own held-out draw.
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub steps: usize,
    /// Mean training loss per 100 steps.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeRecord {
    pub layer: usize,
    pub k: usize,
    pub heldout_mse: f64,
    pub heldout_rel_error: f64,
    pub dead_fraction: f64,
    pub reinitialized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRecord {
    pub layer: usize,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub ranks: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub recovery: Option<RecoveryResult>,
    /// Every component has its own representative cluster and the mean
    /// representative R² reaches the configured minimum. Surplus claimants are noise.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub components: Vec<String>,
    pub settings: Vec<SettingRecord>,
    /// Index into `settings` analyzed downstream.
    pub chosen: usize,
}

impl RecoveryReport {
    pub fn chosen(&self) -> &SettingRecord {
        &self.settings[self.chosen]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Real,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub kind: CandidateKind,
    pub members: Vec<usize>,
    pub rank_pass: bool,
    /// Rows where at least one member latent fires.
    pub n_active: usize,
    /// Principal coordinates fed to the simplex fit.
    pub dims: usize,
    pub curve: Option<ElbowCurve>,
    pub error: Option<String>,
    /// Fit at the chosen K, relative to the output root.
    pub fit: Option<String>,
    /// Component assigned by recovery; real clusters only.
    pub component: Option<usize>,
}

impl Candidate {
    /// Passed the geometric screen: a rank pass and an elbow at K >= 3.
    pub fn screened(&self) -> bool {
        self.rank_pass && self.fit.is_some() && self.curve.as_ref().and_then(|c| c.chosen).is_some_and(|k| k >= 3)
    }

    pub fn chosen_k(&self) -> Option<usize> {
        self.curve.as_ref().and_then(|c| c.chosen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexReport {
    pub layer: usize,
    pub k: usize,
    pub candidates: Vec<Candidate>,
    pub null_attempted: usize,
    pub null_retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTest {
    pub result: Option<BaryAdvantageResult>,
    pub error: Option<String>,
}

impl SplitTest {
    fn from(r: Result<BaryAdvantageResult>) -> Self {
        match r {
            Ok(v) => Self { result: Some(v), error: None },
            Err(e) => Self { result: None, error: Some(e.to_string()) },
        }
    }

    pub fn p(&self) -> Option<f64> {
        self.result.as_ref().map(BaryAdvantageResult::p)
    }

    pub fn frac_wins(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.frac_wins)
    }

    pub fn passes(&self, alpha: f64) -> bool {
        self.p().is_some_and(|p| p < alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub name: String,
    pub kind: CandidateKind,
    pub k: usize,
    pub members: Vec<usize>,
    pub split: SampleSplit,
    pub near_vertex: SplitTest,
    pub interior: SplitTest,
    pub kl: Option<KlResult>,
    pub kl_error: Option<String>,
    /// Held-out R² of the barycentric coordinates per component.
    pub bary_r2: Option<Vec<Option<f64>>>,
    /// `pie[v][i]`: share of member `i` in the mean activation at vertex `v`.
    pub pie: Vec<Vec<f64>>,
    pub component: Option<usize>,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRecord {
    pub name: String,
    pub component: usize,
    pub target: SteeringTarget,
    pub result: Option<SteeringResult>,
    pub error: Option<String>,
}

fn mean_per_100(losses: &[f32]) -> Vec<f64> {
    losses.chunks(100).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64).collect()
}

pub fn gen_data(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    if ctx.importing() {
        return Err(Error::Config("gen-data is not available when analyzing an imported dump".into()));
    }
    let spec = ctx.spec()?;
    let d = &ctx.cfg.data;
    let mut r = crate::rng::stream(ctx.cfg.seed, "capture-data");
    let capture = (0..d.capture_sequences).map(|_| spec.sample_path_with(d.sequence_length, &mut r).tokens).collect();
    let mut r = crate::rng::stream(ctx.cfg.seed, "eval-data");
    let eval = (0..d.eval_sequences).map(|_| spec.sample_path_with(ctx.cfg.lm.context_length + 1, &mut r).tokens).collect();
    let out = ctx.path(SEQUENCES);
    write_json(&out, &ctx.header(Stage::GenData), &Sequences { capture, eval })?;
    Ok(vec![out])
}

fn load_sequences(ctx: &Ctx) -> Result<Sequences> {
    read_json(&ctx.path(SEQUENCES), &ctx.header(Stage::GenData))
}

fn load_lm(ctx: &Ctx) -> Result<Lm> {
    let path = ctx.path(LM_MODEL);
    let (lm, meta) = Lm::load(&path)?;
    check_meta(&path, &meta, &ctx.header(Stage::TrainLm))?;
    Ok(lm)
}

pub fn train_lm(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.require(Stage::GenData)?;
    let spec = ctx.spec()?;
    let seqs = load_sequences(ctx)?;
    let cfg = &ctx.cfg.lm;
    let seed = ctx.seed("train-lm");
    let untrained = Lm::new(cfg.clone(), derive_seed(seed, "lm-init"))?;
    let untrained_accuracy = accuracy_on(&untrained, &seqs.eval);
    let mut window = 0f64;
    let (lm, m) = train_lm_with(&spec, cfg, seed, |step, loss| {
        window += loss as f64;
        if (step + 1) % 500 == 0 {
            log::info!("train-lm step {}/{}: loss {:.4}", step + 1, cfg.steps, window / 500.0);
            window = 0.0;
        }
    })?;
    let accuracy = accuracy_on(&lm, &seqs.eval);
    log::info!("train-lm held-out accuracy {accuracy:.4} (untrained {untrained_accuracy:.4})");
    let model = ctx.path(LM_MODEL);
    lm.save(&model, &ctx.meta(Stage::TrainLm, serde_json::Value::Null))?;
    let report = LmReport {
        chance: 1.0 / cfg.vocab as f64,
        untrained_accuracy,
        accuracy,
        initial_accuracy: m.initial_accuracy,
        final_accuracy: m.final_accuracy,
        steps: m.steps,
        loss_curve: mean_per_100(&m.losses),
    };
    let metrics = ctx.path(LM_METRICS);
    write_json(&metrics, &ctx.header(Stage::TrainLm), &report)?;
    Ok(vec![model, metrics])
}

pub fn capture(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut outs = Vec::new();
    if let Some(src) = &ctx.cfg.data.import_dump {
        let dump = import_dump(src)?;
        if dump.shape.len() != 2 {
            return Err(Error::Format { path: src.clone(), msg: format!("expected a 2-D dump, got shape {:?}", dump.shape) });
        }
        let out = ctx.path(dump_rel(ctx.cfg.grid.layers[0]));
        dump.write(&out)?;
        log::info!("imported {} rows of width {} from {}", dump.rows(), dump.shape[1], src.display());
        outs.push(out);
        if dump.meta.is_some() {
            outs.push(super::dump::sidecar_path(&ctx.path(dump_rel(ctx.cfg.grid.layers[0]))));
        }
        return Ok(outs);
    }
    ctx.require(Stage::TrainLm)?;
    let spec = ctx.spec()?;
    let seqs = load_sequences(ctx)?;
    let lm = load_lm(ctx)?;
    for &layer in &ctx.cfg.grid.layers {
        let cap = capture_residual(&lm, &spec, &seqs.capture, layer)?;
        let out = ctx.path(dump_rel(layer));
        ActivationDump::from_capture(&cap).write(&out)?;
        log::info!("captured layer {layer}: {} rows", cap.positions.len());
        outs.push(super::dump::sidecar_path(&out));
        outs.push(out);
    }
    Ok(outs)
}

fn load_dump(ctx: &Ctx, layer: usize) -> Result<ActivationDump> {
    import_dump(&ctx.path(dump_rel(layer)))
}

pub fn train_sae_stage(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.require(Stage::Capture)?;
    let mut outs = Vec::new();
    let mut records = Vec::new();
    for &layer in &ctx.cfg.grid.layers {
        let x = load_dump(ctx, layer)?.to_tensor()?;
        for &k in &ctx.cfg.grid.ks {
            let cfg = SaeConfig { k, ..ctx.cfg.sae.clone() };
            let (sae, m) = train_sae(&x, &cfg, ctx.seed(&format!("sae-l{layer}-k{k}")))?;
            log::info!("sae layer {layer} k {k}: held-out rel. error {:.4}, dead {:.3}", m.heldout_rel_error, m.dead_fraction);
            let out = ctx.path(sae_rel(layer, k));
            sae.save(&out, ctx.meta(Stage::TrainSae, serde_json::json!({ "layer": layer, "k": k })))?;
            outs.push(out);
            records.push(SaeRecord {
                layer,
                k,
                heldout_mse: m.heldout_mse,
                heldout_rel_error: m.heldout_rel_error,
                dead_fraction: m.dead_fraction,
                reinitialized: m.reinitialized,
            });
        }
    }
    let metrics = ctx.path(SAE_METRICS);
    write_json(&metrics, &ctx.header(Stage::TrainSae), &records)?;
    outs.push(metrics);
    Ok(outs)
}

fn load_sae(ctx: &Ctx, layer: usize, k: usize) -> Result<SaeModel> {
    let path = ctx.path(sae_rel(layer, k));
    let (sae, meta) = SaeModel::load(&path)?;
    check_meta(&path, &meta, &ctx.header(Stage::TrainSae))?;
    Ok(sae)
}

fn load_clusters(ctx: &Ctx, layer: usize, k: usize) -> Result<ClusterSet> {
    let (tsv, basis) = cluster_rel(layer, k);
    let (set, meta) = read_cluster_files(&ctx.path(tsv), &ctx.path(&basis))?;
    check_meta(&ctx.path(basis), &meta, &ctx.header(Stage::Cluster))?;
    Ok(set)
}

/// TopK latents of every dump row.
fn latents(sae: &SaeModel, x: &Tensor<f32>) -> Tensor<f32> {
    sae.encode(&sae.normalize(x))
}

/// `[n, s_k]` belief matrices per component.
fn belief_matrices(beliefs: &[Vec<Vec<f64>>], rows: &[usize]) -> Vec<DMatrix<f64>> {
    let n_comp = beliefs.first().map_or(0, Vec::len);
    (0..n_comp)
        .map(|c| {
            let s = beliefs[rows[0]][c].len();
            DMatrix::from_fn(rows.len(), s, |i, j| beliefs[rows[i]][c][j])
        })
        .collect()
}

/// Fit and test rows split by sequence id.
fn heldout_rows(positions: &[(usize, usize)], rows: &[usize], every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..rows.len()).partition(|&i| positions[rows[i]].0 % every != 0)
}

fn latent_columns(f: &Tensor<f32>, rows: &[usize], members: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), members.len(), |i, j| f.row(rows[i])[members[j]] as f64)
}

pub fn cluster(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.require(Stage::TrainSae)?;
    let cc = &ctx.cfg.cluster;
    let v = &ctx.cfg.validation;
    let components: Vec<String> = if ctx.importing() { vec![] } else { ctx.spec()?.components.iter().map(|c| c.name.clone()).collect() };
    let mut outs = Vec::new();
    let mut settings = Vec::new();
    for &layer in &ctx.cfg.grid.layers {
        let dump = load_dump(ctx, layer)?;
        let x = dump.to_tensor()?;
        let truth = dump.beliefs().ok().map(|b| (b, &dump.meta.as_ref().expect("beliefs imply metadata").positions));
        for &k in &ctx.cfg.grid.ks {
            let sae = load_sae(ctx, layer, k)?;
            let w = sae.unit_directions();
            let set = k_subspace(&w, cc.k, cc.r_max, cc.max_iters, &Init::Cpqr, cc.tau)?;
            let (tsv, basis) = cluster_rel(layer, k);
            write_cluster_files(&set, &ctx.path(&tsv), &ctx.path(&basis), ctx.meta(Stage::Cluster, serde_json::json!({ "layer": layer, "k": k })))?;
            outs.push(ctx.path(tsv));
            outs.push(ctx.path(basis));
            let recovery = match truth {
                Some((beliefs, positions)) => {
                    let f = latents(&sae, &x);
                    let all: Vec<usize> = (0..x.dims2().0).collect();
                    let signals: Vec<DMatrix<f64>> = (0..set.k).map(|c| latent_columns(&f, &all, &set.members(c))).collect();
                    let (fit, test) = heldout_rows(positions, &all, v.heldout_every);
                    Some(recovery_r2(&signals, &belief_matrices(beliefs, &all), &fit, &test, v.recovery_ridge)?)
                }
                None => None,
            };
            let success = recovery
                .as_ref()
                .is_some_and(|r| r.all_recovered() && r.mean_r2.is_some_and(|m| m >= v.min_mean_r2));
            if let Some(r) = &recovery {
                log::info!(
                    "cluster layer {layer} k {k}: {} of {} recovered, {} conflicts, mean R2 {:.3}",
                    r.n_recovered(),
                    r.representative.len(),
                    r.conflicts.len(),
                    r.mean_r2.unwrap_or(f64::NAN)
                );
            }
            settings.push(SettingRecord {
                layer,
                k,
                sizes: set.sizes(),
                ranks: set.ranks.clone(),
                iterations: set.iterations,
                converged: set.converged,
                recovery,
                success,
            });
        }
    }
    let chosen = choose_setting(&settings);
    let s = &settings[chosen];
    log::info!("analyzing layer {} k {} (recovered: {})", s.layer, s.k, s.success);
    let report = ctx.path(RECOVERY);
    write_json(&report, &ctx.header(Stage::Cluster), &RecoveryReport { components, settings, chosen })?;
    outs.push(report);
    Ok(outs)
}

/// Successful settings beat unsuccessful ones, then higher mean R²; ties keep
/// the earlier setting. Without ground truth the first setting is used.
fn choose_setting(settings: &[SettingRecord]) -> usize {
    let key = |s: &SettingRecord| (s.success, s.recovery.as_ref().and_then(|r| r.mean_r2).unwrap_or(f64::NEG_INFINITY));
    let mut best = 0;
    for (i, s) in settings.iter().enumerate().skip(1) {
        let (a, b) = (key(s), key(&settings[best]));
        if (a.0 && !b.0) || (a.0 == b.0 && a.1 > b.1) {
            best = i;
        }
    }
    best
}

fn load_recovery(ctx: &Ctx) -> Result<RecoveryReport> {
    read_json(&ctx.path(RECOVERY), &ctx.header(Stage::Cluster))
}

/// A cluster's reconstruction on its active rows, in principal coordinates.
#[derive(Debug, Clone)]
pub struct Projection {
    /// Dump rows where at least one member fires.
    pub active: Vec<usize>,
    pub x: Tensor<f32>,
    pub mean: DVector<f64>,
    /// `[d_model, dims]`.
    pub axes: DMatrix<f64>,
}

impl Projection {
    /// Maps a principal-coordinate direction back to raw residual units.
    pub fn residual_direction(&self, d: &[f32], input_scale: f32) -> Vec<f32> {
        let v = &self.axes * DVector::from_iterator(d.len(), d.iter().map(|&v| v as f64));
        v.iter().map(|&x| x as f32 * input_scale).collect()
    }
}

pub fn project_cluster(sae: &SaeModel, f: &Tensor<f32>, members: &[usize], max_dim: usize) -> Result<Projection> {
    let n = f.dims2().0;
    let active: Vec<usize> = (0..n).filter(|&i| members.iter().any(|&j| f.row(i)[j] > 0.0)).collect();
    if active.len() < 2 {
        return Err(Error::InsufficientData(format!("{} active rows", active.len())));
    }
    let contrib = to_matrix(&sae.cluster_contribution(&f.select_rows(&active), members));
    let (mean, axes) = principal_axes(&contrib, max_dim, PCA_REL_TOL);
    if axes.ncols() == 0 {
        return Err(Error::InsufficientData("cluster reconstruction has no variance".into()));
    }
    let mut p = contrib;
    for mut r in p.row_iter_mut() {
        r -= mean.transpose();
    }
    let p = p * &axes;
    let (rows, dims) = p.shape();
    let x = Tensor::new(&[rows, dims], (0..rows * dims).map(|i| p[(i / dims, i % dims)] as f32).collect());
    Ok(Projection { active, x, mean, axes })
}

fn aanet_cfg(ctx: &Ctx) -> AanetConfig {
    ctx.cfg.simplex.aanet.clone()
}

pub fn aanet(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.require(Stage::Cluster)?;
    let rec = load_recovery(ctx)?;
    let setting = rec.chosen();
    let (layer, k) = (setting.layer, setting.k);
    let set = load_clusters(ctx, layer, k)?;
    let sae = load_sae(ctx, layer, k)?;
    let x = load_dump(ctx, layer)?.to_tensor()?;
    let f = latents(&sae, &x);
    let w = sae.unit_directions();
    let cc = &ctx.cfg.cluster;
    let sc = &ctx.cfg.simplex;
    let mut todo: Vec<(String, CandidateKind, Vec<usize>, Option<usize>)> = Vec::new();
    for c in 0..set.k {
        let component = setting.recovery.as_ref().and_then(|r| r.assignment[c]);
        todo.push((format!("real{c}"), CandidateKind::Real, set.members(c), component));
    }
    let nulls = make_null_clusters(sae.d_sae, &set.sizes(), sc.null_attempts, ctx.seed("null-clusters"), |m| {
        Ok(rank_screen(&w, m, cc.tau, cc.min_rank))
    })?;
    for (i, m) in nulls.clusters.iter().enumerate() {
        todo.push((format!("null{i}"), CandidateKind::Null, m.clone(), None));
    }
    let cfg = aanet_cfg(ctx);
    let mut outs = Vec::new();
    let mut candidates = Vec::new();
    for (name, kind, members, component) in todo {
        let rank_pass = rank_screen(&w, &members, cc.tau, cc.min_rank);
        let mut cand = Candidate { name: name.clone(), kind, members, rank_pass, n_active: 0, dims: 0, curve: None, error: None, fit: None, component };
        if rank_pass {
            match sweep_candidate(ctx, &sae, &f, &mut cand, &cfg) {
                Ok(Some(p)) => outs.push(p),
                Ok(None) => {}
                Err(e) => {
                    log::warn!("{name}: {e}");
                    cand.error = Some(e.to_string());
                }
            }
        }
        candidates.push(cand);
    }
    let report = ctx.path(SIMPLEX);
    write_json(
        &report,
        &ctx.header(Stage::Aanet),
        &SimplexReport { layer, k, candidates, null_attempted: nulls.attempted, null_retained: nulls.retained },
    )?;
    outs.push(report);
    Ok(outs)
}

fn sweep_candidate(ctx: &Ctx, sae: &SaeModel, f: &Tensor<f32>, cand: &mut Candidate, cfg: &AanetConfig) -> Result<Option<PathBuf>> {
    let proj = project_cluster(sae, f, &cand.members, ctx.cfg.simplex.max_dim)?;
    cand.n_active = proj.active.len();
    cand.dims = proj.axes.ncols();
    let (curve, fits) = sweep_k(&proj.x, cfg, ctx.seed(&format!("aanet-{}", cand.name)))?;
    log::info!("{}: {} active rows, {} dims, elbow {:?} (peak {:.3})", cand.name, cand.n_active, cand.dims, curve.chosen, curve.peak);
    let chosen = curve.chosen;
    cand.curve = Some(curve);
    let Some(kk) = chosen else { return Ok(None) };
    let Some(fit) = cfg.ks.iter().position(|&q| q == kk).and_then(|i| fits[i].as_ref()) else { return Ok(None) };
    let rel = format!("simplex/{}_K{kk}.bin", cand.name);
    let axes: Vec<Vec<f64>> = proj.axes.row_iter().map(|r| r.iter().copied().collect()).collect();
    let meta = ctx.meta(Stage::Aanet, serde_json::json!({ "members": cand.members, "mean": proj.mean.as_slice(), "axes": axes }));
    fit.save(&ctx.path(&rel), meta)?;
    cand.fit = Some(rel.clone());
    Ok(Some(ctx.path(rel)))
}

/// Re-runs the K sweep for `members` of the chosen setting under another seed.
pub fn resweep(ctx: &Ctx, members: &[usize], seed: u64) -> Result<ElbowCurve> {
    ctx.require(Stage::Cluster)?;
    let setting = load_recovery(ctx)?.chosen().clone();
    let sae = load_sae(ctx, setting.layer, setting.k)?;
    let f = latents(&sae, &load_dump(ctx, setting.layer)?.to_tensor()?);
    let proj = project_cluster(&sae, &f, members, ctx.cfg.simplex.max_dim)?;
    Ok(sweep_k(&proj.x, &aanet_cfg(ctx), seed)?.0)
}

fn load_simplex(ctx: &Ctx) -> Result<SimplexReport> {
    read_json(&ctx.path(SIMPLEX), &ctx.header(Stage::Aanet))
}

fn load_fit(ctx: &Ctx, rel: &str) -> Result<SimplexFit> {
    let path = ctx.path(rel);
    let (fit, meta) = SimplexFit::load(&path)?;
    check_meta(&path, &meta, &ctx.header(Stage::Aanet))?;
    Ok(fit)
}

fn bary_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (_, k) = t.dims2();
    t.data().chunks_exact(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Next-token log-probabilities per dump row, computed lazily per sequence.
struct LogProbs<'a> {
    lm: &'a Lm,
    seqs: &'a [Vec<usize>],
    positions: &'a [(usize, usize)],
    cache: std::collections::HashMap<usize, Tensor<f32>>,
}

impl LogProbs<'_> {
    fn row(&mut self, r: usize) -> Vec<f64> {
        let (s, p) = self.positions[r];
        let logits = self.cache.entry(s).or_insert_with(|| self.lm.logits(&self.seqs[s]));
        log_softmax(logits.row(p))
    }
}

/// Everything validation needs from upstream stages.
struct Analysis {
    spec: CompositeSpec,
    lm: Lm,
    seqs: Sequences,
    sae: SaeModel,
    f: Tensor<f32>,
    dump: ActivationDump,
    simplex: SimplexReport,
}

fn load_analysis(ctx: &Ctx) -> Result<Analysis> {
    ctx.require(Stage::Aanet)?;
    let simplex = load_simplex(ctx)?;
    let dump = load_dump(ctx, simplex.layer)?;
    dump.beliefs()?;
    ctx.require(Stage::TrainLm)?;
    let sae = load_sae(ctx, simplex.layer, simplex.k)?;
    let f = latents(&sae, &dump.to_tensor()?);
    Ok(Analysis { spec: ctx.spec()?, lm: load_lm(ctx)?, seqs: load_sequences(ctx)?, sae, f, dump, simplex })
}

impl Analysis {
    fn positions(&self) -> &[(usize, usize)] {
        &self.dump.meta.as_ref().expect("checked by load_analysis").positions
    }

    fn beliefs(&self) -> &[Vec<Vec<f64>>] {
        self.dump.beliefs().expect("checked by load_analysis")
    }
}

pub fn validate(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let a = load_analysis(ctx)?;
    let v = &ctx.cfg.validation;
    let mut lp = LogProbs { lm: &a.lm, seqs: &a.seqs.capture, positions: a.positions(), cache: Default::default() };
    let mut records = Vec::new();
    for cand in a.simplex.candidates.iter().filter(|c| c.screened()) {
        let fit = load_fit(ctx, cand.fit.as_deref().expect("screened candidates have fits"))?;
        let proj = project_cluster(&a.sae, &a.f, &cand.members, ctx.cfg.simplex.max_dim)?;
        let bary = fit.barycentric(&proj.x);
        let rows = bary_rows(&bary);
        let split = split_samples(&rows, &v.split, ctx.seed(&format!("split-{}", cand.name)))?;
        let (nv, labels) = split.labelled_near_vertex();
        // compact matrices over the rows the tests touch
        let mut used: Vec<usize> = nv.iter().chain(&split.interior).copied().collect();
        used.sort_unstable();
        used.dedup();
        let local = |r: &[usize]| -> Vec<usize> { r.iter().map(|x| used.binary_search(x).expect("row in used set")).collect() };
        let kk = fit.k();
        let bm = DMatrix::from_fn(used.len(), kk, |i, j| rows[used[i]][j]);
        let dump_rows: Vec<usize> = used.iter().map(|&i| proj.active[i]).collect();
        let lat = latent_columns(&a.f, &dump_rows, &cand.members);
        let lps: Vec<Vec<f64>> = dump_rows.iter().map(|&r| lp.row(r)).collect();
        let vocab = lps.first().map_or(0, Vec::len);
        let lpm = DMatrix::from_fn(lps.len(), vocab, |i, j| lps[i][j]);
        let seed = ctx.seed(&format!("bary-{}", cand.name));
        let near_vertex = SplitTest::from(bary_advantage(&local(&nv), Some(&labels), &bm, &lat, &lpm, &v.bary, seed));
        let interior = SplitTest::from(bary_advantage(&local(&split.interior), None, &bm, &lat, &lpm, &v.bary, seed));
        let (kl, kl_error) = match kl_ratio(
            &split,
            |r| Ok(lp.row(proj.active[r]).iter().map(|l| l.exp()).collect()),
            v.kl_pairs,
            ctx.seed(&format!("kl-{}", cand.name)),
        ) {
            Ok(k) => (Some(k), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let bary_r2 = {
            let bmat = DMatrix::from_fn(proj.active.len(), kk, |i, j| rows[i][j]);
            let (fit_rows, test_rows) = heldout_rows(a.positions(), &proj.active, v.heldout_every);
            recovery_r2(&[bmat], &belief_matrices(a.beliefs(), &proj.active), &fit_rows, &test_rows, v.recovery_ridge).ok().map(|r| r.r2[0].clone())
        };
        let member_rows: Vec<Vec<f64>> = proj.active.iter().map(|&r| cand.members.iter().map(|&j| a.f.row(r)[j] as f64).collect()).collect();
        let pie = latent_vertex_shares(&split, &member_rows);
        let passes = near_vertex.passes(v.alpha) || interior.passes(v.alpha);
        log::info!(
            "{}: NV wins {:?} p {:?}; SI wins {:?} p {:?}; KL {:?}",
            cand.name,
            near_vertex.frac_wins(),
            near_vertex.p(),
            interior.frac_wins(),
            interior.p(),
            kl.as_ref().map(|k| k.ratio)
        );
        records.push(ValidationRecord {
            name: cand.name.clone(),
            kind: cand.kind,
            k: kk,
            members: cand.members.clone(),
            split,
            near_vertex,
            interior,
            kl,
            kl_error,
            bary_r2,
            pie,
            component: cand.component,
            passes,
        });
    }
    let out = ctx.path(VALIDATION);
    write_json(&out, &ctx.header(Stage::Validate), &records)?;
    Ok(vec![out])
}

pub fn load_validation(ctx: &Ctx) -> Result<Vec<ValidationRecord>> {
    read_json(&ctx.path(VALIDATION), &ctx.header(Stage::Validate))
}

pub fn steer(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.require(Stage::Validate)?;
    let a = load_analysis(ctx)?;
    let records = load_validation(ctx)?;
    let sc = &ctx.cfg.steering;
    let ctx_len = a.lm.cfg.context_length;
    let mut out_records = Vec::new();
    for rec in records.iter().filter(|r| r.kind == CandidateKind::Real) {
        let Some(component) = rec.component else { continue };
        let cand = a.simplex.candidates.iter().find(|c| c.name == rec.name).expect("validated candidates come from the simplex report");
        let fit = load_fit(ctx, cand.fit.as_deref().expect("screened candidates have fits"))?;
        let proj = project_cluster(&a.sae, &a.f, &cand.members, ctx.cfg.simplex.max_dim)?;
        let target = match a.spec.components[component].kind {
            ProcessKind::Hmm => SteeringTarget::OneHot,
            ProcessKind::Ghmm => SteeringTarget::Centroid,
        };
        let positions = a.positions();
        let prompts: Vec<Vec<Vec<usize>>> = rec
            .split
            .near_vertex
            .iter()
            .map(|rows| {
                rows.iter()
                    .map(|&i| positions[proj.active[i]])
                    .filter(|&(_, p)| p + sc.length <= ctx_len)
                    .take(sc.prompts_per_vertex)
                    .map(|(s, p)| a.seqs.capture[s][..=p].to_vec())
                    .collect()
            })
            .collect();
        let goals: Vec<Vec<f64>> = rec
            .split
            .near_vertex
            .iter()
            .map(|rows| {
                let bs: Vec<&[f64]> = rows.iter().map(|&i| a.beliefs()[proj.active[i]][component].as_slice()).collect();
                target.goal(&bs).unwrap_or_default()
            })
            .collect();
        let res = steering_score(
            &a.lm,
            &a.spec,
            component,
            a.simplex.layer,
            &prompts,
            &goals,
            |s, t| Ok(proj.residual_direction(&fit.vertex_delta(s, t)?, a.sae.input_scale)),
            sc,
        );
        let (result, error) = match res {
            Ok(r) => {
                log::info!("{} steering {:.3} vs control {:.3}", rec.name, r.score, r.control);
                (Some(r), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        out_records.push(SteeringRecord { name: rec.name.clone(), component, target, result, error });
    }
    let out = ctx.path(STEERING);
    write_json(&out, &ctx.header(Stage::Steer), &out_records)?;
    Ok(vec![out])
}

pub fn load_steering(ctx: &Ctx) -> Result<Vec<SteeringRecord>> {
    read_json(&ctx.path(STEERING), &ctx.header(Stage::Steer))
}

pub fn load_lm_report(ctx: &Ctx) -> Result<LmReport> {
    read_json(&ctx.path(LM_METRICS), &ctx.header(Stage::TrainLm))
}

pub fn load_recovery_report(ctx: &Ctx) -> Result<RecoveryReport> {
    load_recovery(ctx)
}

pub fn load_simplex_report(ctx: &Ctx) -> Result<SimplexReport> {
    load_simplex(ctx)
}
