// SPDX-License-Identifier: MIT OR Apache-2.0

//! Archetypal-analysis autoencoder with a softmax simplex bottleneck,
//! multi-K sweeps, and elbow detection.
//!
//! Encoder `d -> 256 -> 128 -> K-1`; the `K-1` logits get a fixed zero logit
//! appended before the softmax, so every code is a point on the simplex.
//! Decoder `K -> 128 -> 256 -> d`.

use std::path::Path;

use belief_nn::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{io, rng, Error, Result};

pub const AANET_MAGIC: &[u8; 4] = b"BGAA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AanetConfig {
    pub hidden: [usize; 2],
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_simplex: f64,
    pub lambda_nonneg: f64,
    /// Gaussian noise added to barycentric codes before decoding (training
    /// only), decayed linearly to zero at `noise_until` of the steps.
    pub latent_noise: f64,
    pub noise_until: f64,
    /// Weight tying vertex `i` to the `i`-th extreme training row in both
    /// directions (decoder image and encoder code).
    pub lambda_archetype: f64,
    pub restarts: usize,
    pub val_frac: f64,
    /// Validation interval for best-checkpoint selection.
    pub eval_every: usize,
    pub ks: Vec<usize>,
    /// Minimum normalized second difference accepted as an elbow.
    pub elbow_threshold: f64,
    /// Row cap applied before fitting (seeded subsample).
    pub max_rows: usize,
}

impl Default for AanetConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 128],
            steps: 10_000,
            batch: 256,
            lr: 1e-3,
            lambda_simplex: 1.0,
            lambda_nonneg: 1.0,
            latent_noise: 0.05,
            noise_until: 0.5,
            lambda_archetype: 0.1,
            restarts: 5,
            val_frac: 0.1,
            eval_every: 100,
            ks: vec![2, 3, 4, 5, 6, 7],
            elbow_threshold: 0.15,
            max_rows: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Encoder and decoder parameters for one `K`.
#[derive(Debug, Clone)]
pub struct AaNet {
    pub k: usize,
    pub d: usize,
    pub params: ParamStore<f32>,
    enc: Vec<Layer>,
    dec: Vec<Layer>,
}

impl AaNet {
    pub fn new(d: usize, k: usize, hidden: [usize; 2], seed: u64) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::invalid(format!("AANet needs K >= 2 and d >= 1 (K={k}, d={d})")));
        }
        let mut r = rng::seeded(seed);
        let mut p = ParamStore::new();
        let mut mk = |name: &str, fan_in: usize, fan_out: usize, p: &mut ParamStore<f32>| Layer {
            w: p.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, true, &mut r),
            b: p.add_const(format!("{name}.b"), &[fan_out], 0.0, false),
        };
        let [h1, h2] = hidden;
        let enc = vec![mk("enc0", d, h1, &mut p), mk("enc1", h1, h2, &mut p), mk("enc2", h2, k - 1, &mut p)];
        let dec = vec![mk("dec0", k, h2, &mut p), mk("dec1", h2, h1, &mut p), mk("dec2", h1, d, &mut p)];
        Ok(Self { k, d, params: p, enc, dec })
    }

    fn dense(&self, g: &mut Graph<f32>, x: Var, l: &Layer, relu: bool) -> Var {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let h = g.matmul(x, w);
        let h = g.add_row(h, b);
        if relu {
            g.relu(h)
        } else {
            h
        }
    }

    /// Barycentric codes `[n, K]`.
    pub fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let h = self.dense(g, x, &self.enc[0], true);
        let h = self.dense(g, h, &self.enc[1], true);
        let z = self.dense(g, h, &self.enc[2], false);
        let z = g.pad_zero_col(z);
        g.softmax(z)
    }

    pub fn decode_graph(&self, g: &mut Graph<f32>, a: Var) -> Var {
        let h = self.dense(g, a, &self.dec[0], true);
        let h = self.dense(g, h, &self.dec[1], true);
        self.dense(g, h, &self.dec[2], false)
    }

    fn predict(&self, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let a = self.encode_graph(&mut g, xi);
        let r = self.decode_graph(&mut g, a);
        (g.value(a).clone(), g.value(r).clone())
    }
}

/// A trained simplex model for one `K`.
#[derive(Debug, Clone)]
pub struct SimplexFit {
    pub net: AaNet,
    /// Data-space centering applied before the network.
    pub mean: Vec<f32>,
    pub scale: f32,
    /// Best validation loss per restart; `None` for failed restarts.
    pub restart_losses: Vec<Option<f64>>,
    pub chosen_restart: usize,
    /// Mean of the successful restarts' validation losses.
    pub mean_loss: f64,
    /// Decoder images of the one-hot codes, `[K, d]`, in data space.
    pub archetypes: Vec<Vec<f32>>,
}

impl SimplexFit {
    pub fn k(&self) -> usize {
        self.net.k
    }

    fn standardize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        standardize(x, &self.mean, self.scale)
    }

    /// Barycentric coordinates `[n, K]` for data rows.
    pub fn barycentric(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let xi = g.input(self.standardize(x));
        let a = self.net.encode_graph(&mut g, xi);
        g.value(a).clone()
    }

    /// Decoder output for barycentric codes, in data space.
    pub fn decode(&self, a: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let ai = g.input(a.clone());
        let r = self.net.decode_graph(&mut g, ai);
        let mut out = g.value(r).clone();
        let d = self.net.d;
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(v, &m)| *v = *v * self.scale + m);
        }
        out
    }

    /// `decode(e_to) - decode(e_from)` in data space.
    pub fn vertex_delta(&self, from: usize, to: usize) -> Result<Vec<f32>> {
        let k = self.k();
        if from == to || from >= k || to >= k {
            return Err(Error::invalid(format!("vertex pair ({from}, {to}) invalid for K={k}")));
        }
        Ok(self.archetypes[to].iter().zip(&self.archetypes[from]).map(|(a, b)| a - b).collect())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "k": self.k(),
            "d": self.net.d,
            "hidden": [self.net.params.value(self.net.enc[0].w).shape()[1], self.net.params.value(self.net.enc[1].w).shape()[1]],
            "mean": self.mean,
            "scale": self.scale,
            "restart_losses": self.restart_losses,
            "chosen_restart": self.chosen_restart,
            "mean_loss": self.mean_loss,
            "meta": meta,
        });
        io::write_checkpoint(path, AANET_MAGIC, &header, &io::store_tensors(&self.net.params))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (h, tensors): (serde_json::Value, _) = io::read_checkpoint(path, AANET_MAGIC)?;
        let field = |name: &str| h.get(name).cloned().ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: format!("missing header field {name}") });
        let k: usize = serde_json::from_value(field("k")?)?;
        let d: usize = serde_json::from_value(field("d")?)?;
        let hidden: [usize; 2] = serde_json::from_value(field("hidden")?)?;
        let mut net = AaNet::new(d, k, hidden, 0)?;
        io::load_into_store(path, &mut net.params, tensors)?;
        let mut fit = SimplexFit {
            net,
            mean: serde_json::from_value(field("mean")?)?,
            scale: serde_json::from_value(field("scale")?)?,
            restart_losses: serde_json::from_value(field("restart_losses")?)?,
            chosen_restart: serde_json::from_value(field("chosen_restart")?)?,
            mean_loss: serde_json::from_value(field("mean_loss")?)?,
            archetypes: vec![],
        };
        fit.archetypes = compute_archetypes(&fit);
        Ok((fit, h["meta"].clone()))
    }
}

fn compute_archetypes(fit: &SimplexFit) -> Vec<Vec<f32>> {
    let k = fit.k();
    let out = fit.decode(&identity(k));
    (0..k).map(|i| out.row(i).to_vec()).collect()
}

fn standardize(x: &Tensor<f32>, mean: &[f32], scale: f32) -> Tensor<f32> {
    let (n, d) = x.dims2();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        row.iter_mut().zip(mean).for_each(|(v, &m)| *v = (*v - m) / scale);
    }
    Tensor::new(&[n, d], out)
}

/// Column means and the RMS distance to them.
fn fit_standardization(x: &Tensor<f32>) -> (Vec<f32>, f32) {
    let (n, d) = x.dims2();
    let mut mean = vec![0f64; d];
    for row in x.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = x.data().chunks_exact(d).map(|row| row.iter().zip(&mean).map(|(&v, &m)| (v as f64 - m).powi(2)).sum::<f64>()).sum();
    let rms = (ss / n as f64).sqrt();
    (mean.iter().map(|&m| m as f32).collect(), if rms > 1e-12 { rms as f32 } else { 1.0 })
}

fn mse_rows(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn identity(k: usize) -> Tensor<f32> {
    Tensor::new(&[k, k], (0..k * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect())
}

/// `k` extreme rows of `x` by successive projection on rows lifted with a
/// constant coordinate, so that affine simplices become cones. When the data
/// has fewer than `k` independent extremes the found ones are repeated.
pub fn extreme_rows(x: &Tensor<f32>, k: usize) -> Result<Vec<usize>> {
    let (_, d) = x.dims2();
    let lifted: Vec<Vec<f64>> = x
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().map(|&v| v as f64).chain(std::iter::once(1.0)).collect())
        .collect();
    match crate::clustering::cpqr_pivots(&lifted, k) {
        Err(Error::Seeding { rank, .. }) if rank > 0 => {
            let found = crate::clustering::cpqr_pivots(&lifted, rank)?;
            Ok((0..k).map(|i| found[i % rank]).collect())
        }
        other => other,
    }
}

/// Trains one restart; returns the best-validation parameters and loss.
fn train_restart(
    xt: &Tensor<f32>,
    xv: &Tensor<f32>,
    anchors: Option<&Tensor<f32>>,
    k: usize,
    cfg: &AanetConfig,
    seed: u64,
) -> Result<(AaNet, f64)> {
    let (n, d) = xt.dims2();
    let mut net = AaNet::new(d, k, cfg.hidden, rng::derive_seed(seed, "init"))?;
    let opt = AdamW::new(cfg.lr);
    let mut r = rng::stream(seed, "batches");
    let batch = cfg.batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut best = (net.clone(), f64::INFINITY);
    let eval_every = cfg.eval_every.max(1);
    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut r);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = xt.select_rows(rows);
        let mut g = Graph::new();
        let xi = g.input(xb);
        let a = net.encode_graph(&mut g, xi);
        let sigma = cfg.latent_noise * (1.0 - step as f64 / (cfg.noise_until * cfg.steps as f64).max(1.0)).max(0.0);
        let code = if sigma > 0.0 {
            let noise: Vec<f32> = (0..batch * k).map(|_| (Distribution::<f64>::sample(&StandardNormal, &mut r) * sigma) as f32).collect();
            let nv = g.input(Tensor::new(&[batch, k], noise));
            g.add(a, nv)
        } else {
            a
        };
        let rec = net.decode_graph(&mut g, code);
        let mut loss = g.mse(rec, xi);
        if let Some(anchor) = anchors {
            // vertex i decodes to extreme row i, which encodes back to vertex i
            let eye = g.input(identity(k));
            let arch = net.decode_graph(&mut g, eye);
            let t = g.input(anchor.clone());
            let p = g.mse(arch, t);
            let back = net.encode_graph(&mut g, t);
            let q = g.mse(back, eye);
            let p = g.add(p, q);
            let p = g.scale(p, cfg.lambda_archetype);
            loss = g.add(loss, p);
        }
        if cfg.lambda_simplex != 0.0 {
            // lambda1 * mean_rows(1 - |a|_1)
            let abs = g.abs(a);
            let l1 = g.sum(abs);
            let l1 = g.scale(l1, -1.0 / batch as f64);
            let p = g.add_scalar(l1, 1.0);
            let p = g.scale(p, cfg.lambda_simplex);
            loss = g.add(loss, p);
        }
        if cfg.lambda_nonneg != 0.0 {
            // lambda2 * mean_rows(sum_i |a_i| 1(a_i < 0))
            let neg = g.scale(a, -1.0);
            let neg = g.relu(neg);
            let s = g.sum(neg);
            let p = g.scale(s, cfg.lambda_nonneg / batch as f64);
            loss = g.add(loss, p);
        }
        g.backward(loss).map_err(|source| Error::Training { step, source })?;
        net.params.zero_grad();
        g.accumulate_param_grads(&mut net.params);
        opt.step(&mut net.params);
        if (step + 1) % eval_every == 0 || step + 1 == cfg.steps {
            let (_, rv) = net.predict(xv);
            let vl = mse_rows(&rv, xv);
            if !vl.is_finite() {
                return Err(Error::Training { step, source: belief_nn::NnError::NonFinite { op: "validation" } });
            }
            if vl < best.1 {
                best = (net.clone(), vl);
            }
        }
    }
    if !best.1.is_finite() {
        // zero steps: evaluate the initialization
        let (_, rv) = net.predict(xv);
        best = (net, mse_rows(&rv, xv));
    }
    Ok(best)
}

/// Fits `cfg.restarts` AANets for one `K` and keeps the restart with the
/// lowest validation reconstruction loss.
pub fn fit_aanet(x: &Tensor<f32>, k: usize, cfg: &AanetConfig, seed: u64) -> Result<SimplexFit> {
    let (n0, d) = x.dims2();
    if k < 2 {
        return Err(Error::invalid("K must be at least 2"));
    }
    if n0 < 10 * k {
        return Err(Error::InsufficientData(format!("{n0} rows for K={k}; need at least {}", 10 * k)));
    }
    if d + 1 < k {
        return Err(Error::invalid(format!("data dimension {d} < K-1 = {}", k - 1)));
    }
    let mut r = rng::stream(seed, "aanet-split");
    let mut order: Vec<usize> = (0..n0).collect();
    order.shuffle(&mut r);
    order.truncate(cfg.max_rows.max(10 * k));
    let n = order.len();
    let n_val = ((n as f64 * cfg.val_frac).round() as usize).clamp(1, n - 1);
    let (val, train) = order.split_at(n_val);
    let (mean, scale) = fit_standardization(&x.select_rows(train));
    let xs = standardize(x, &mean, scale);
    let xt = xs.select_rows(train);
    let xv = xs.select_rows(val);
    let anchors = if cfg.lambda_archetype > 0.0 {
        match extreme_rows(&xt, k) {
            Ok(rows) => Some(xt.select_rows(&rows)),
            Err(e) => {
                log::warn!("no extreme-row anchors for K={k}: {e}");
                None
            }
        }
    } else {
        None
    };

    let mut losses = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(AaNet, f64, usize)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let rs = rng::derive_seed(seed, &format!("aanet-k{k}-restart{restart}"));
        match train_restart(&xt, &xv, anchors.as_ref(), k, cfg, rs) {
            Ok((net, vl)) => {
                losses.push(Some(vl));
                if best.as_ref().is_none_or(|b| vl < b.1) {
                    best = Some((net, vl, restart));
                }
            }
            Err(e) => {
                log::warn!("AANet K={k} restart {restart} failed: {e}");
                losses.push(None);
            }
        }
    }
    let Some((net, _, chosen)) = best else {
        return Err(Error::Fitting(format!("all {} restarts failed for K={k}", losses.len())));
    };
    let ok: Vec<f64> = losses.iter().flatten().copied().collect();
    let mean_loss = ok.iter().sum::<f64>() / ok.len() as f64;
    let mut fit = SimplexFit { net, mean, scale, restart_losses: losses, chosen_restart: chosen, mean_loss, archetypes: vec![] };
    fit.archetypes = compute_archetypes(&fit);
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub ks: Vec<usize>,
    /// Mean restart validation loss per K; `None` where the fit failed.
    pub losses: Vec<Option<f64>>,
    pub chosen: Option<usize>,
    /// Largest normalized second difference found.
    pub peak: f64,
}

/// Chosen `K` by the max normalized second difference rule.
///
/// Losses are min-max normalized; interior points get
/// `L[i-1] - 2 L[i] + L[i+1]`. The argmax is accepted when it reaches
/// `threshold`; `K = 2` maps to `None`.
pub fn detect_elbow(ks: &[usize], losses: &[f64], threshold: f64) -> (Option<usize>, f64) {
    assert_eq!(ks.len(), losses.len(), "one loss per K");
    if ks.len() < 3 {
        return (None, 0.0);
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return (None, 0.0);
    }
    let norm: Vec<f64> = losses.iter().map(|l| (l - lo) / (hi - lo)).collect();
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 1..norm.len() - 1 {
        let sd = norm[i - 1] - 2.0 * norm[i] + norm[i + 1];
        if sd > best.1 + 1e-12 {
            best = (i, sd);
        }
    }
    let k = ks[best.0];
    if best.1 >= threshold && k != 2 {
        (Some(k), best.1)
    } else {
        (None, best.1.max(0.0))
    }
}

/// Fits every `K` in `cfg.ks` and applies [`detect_elbow`] to the valid points.
pub fn sweep_k(x: &Tensor<f32>, cfg: &AanetConfig, seed: u64) -> Result<(ElbowCurve, Vec<Option<SimplexFit>>)> {
    let mut losses = Vec::new();
    let mut fits = Vec::new();
    for &k in &cfg.ks {
        match fit_aanet(x, k, cfg, seed) {
            Ok(f) => {
                losses.push(Some(f.mean_loss));
                fits.push(Some(f));
            }
            Err(e) => {
                log::warn!("sweep K={k} failed: {e}");
                losses.push(None);
                fits.push(None);
            }
        }
    }
    let valid: Vec<(usize, f64)> = cfg.ks.iter().zip(&losses).filter_map(|(&k, l)| l.map(|l| (k, l))).collect();
    if valid.len() < 3 {
        return Err(Error::Sweep { valid: valid.len() });
    }
    let (vk, vl): (Vec<usize>, Vec<f64>) = valid.into_iter().unzip();
    let (chosen, peak) = detect_elbow(&vk, &vl, cfg.elbow_threshold);
    Ok((ElbowCurve { ks: cfg.ks.clone(), losses, chosen, peak }, fits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elbow_hand_example() {
        let ks = [2, 3, 4, 5, 6, 7];
        assert_eq!(detect_elbow(&ks, &[1.0, 0.10, 0.07, 0.05, 0.05, 0.05], 0.15).0, Some(3));
        let linear: Vec<f64> = ks.iter().map(|&k| 10.0 - k as f64).collect();
        assert_eq!(detect_elbow(&ks, &linear, 0.15).0, None);
        assert_eq!(detect_elbow(&ks, &[2.0; 6], 0.15).0, None);
        assert_eq!(detect_elbow(&ks, &[1.0, 0.8, 0.6, 0.05, 0.04, 0.03], 0.15).0, Some(5));
    }

    #[test]
    fn elbow_at_two_is_none() {
        assert_eq!(detect_elbow(&[1, 2, 3], &[1.0, 0.0, 0.0], 0.15).0, None);
    }

    #[test]
    fn barycentric_rows_are_on_the_simplex() {
        let net = AaNet::new(6, 4, [16, 8], 3).unwrap();
        let mut r = rng::seeded(1);
        let x = Tensor::new(&[10_000, 6], (0..60_000).map(|_| rand::Rng::random::<f32>(&mut r) * 20.0 - 10.0).collect());
        let (a, _) = net.predict(&x);
        for row in a.data().chunks_exact(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_too_few_rows() {
        let x = Tensor::new(&[20, 3], vec![0.5; 60]);
        assert!(matches!(fit_aanet(&x, 3, &AanetConfig::default(), 0), Err(Error::InsufficientData(_))));
    }
}
