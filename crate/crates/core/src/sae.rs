// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder over residual-stream rows.
//!
//! Inputs are centered and scaled to unit mean norm before training; the
//! model works in that normalized space. Latents are
//! `TopK(ReLU((x - b_dec) W_enc + b_enc))`, ranked by activation times
//! decoder-row norm, and reconstructions are `f W_dec + b_dec`.

use std::path::Path;

use belief_nn::{topk_positive, AdamW, Graph, ParamId, ParamStore, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{io, rng, Error, Result};

pub const SAE_MAGIC: &[u8; 4] = b"BGSA";

/// TopK values swept for the toy model.
pub const K_GRID: [usize; 13] = [3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 19, 22, 25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub d_sae: usize,
    pub k: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Consecutive inactive steps before a latent is reinitialized.
    pub dead_after: usize,
    pub heldout_frac: f64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self { d_sae: 256, k: 12, steps: 20_000, batch: 256, lr: 1e-3, dead_after: 2000, heldout_frac: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    /// Mean squared error per element on held-out rows (normalized space).
    pub heldout_mse: f64,
    /// `sum |x - x_hat|^2 / sum |x - mean|^2` on held-out rows.
    pub heldout_rel_error: f64,
    /// Fraction of latents that never fire on held-out rows.
    pub dead_fraction: f64,
    pub reinitialized: usize,
    /// Training loss every 100 steps.
    pub loss_curve: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SaeModel {
    pub d_model: usize,
    pub d_sae: usize,
    pub k: usize,
    pub input_mean: Vec<f32>,
    pub input_scale: f32,
    pub params: ParamStore<f32>,
    w_enc: ParamId,
    b_enc: ParamId,
    w_dec: ParamId,
    b_dec: ParamId,
}

#[derive(Serialize, Deserialize)]
struct SaeHeader {
    d_model: usize,
    d_sae: usize,
    k: usize,
    input_mean: Vec<f32>,
    input_scale: f32,
    meta: serde_json::Value,
}

impl SaeModel {
    /// Random unit decoder rows, encoder tied to the decoder transpose.
    pub fn new(d_model: usize, d_sae: usize, k: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || d_sae == 0 || k == 0 || k > d_sae {
            return Err(Error::invalid(format!("invalid SAE shape d_model={d_model} d_sae={d_sae} k={k}")));
        }
        let mut r = rng::seeded(seed);
        let mut dec = vec![0f32; d_sae * d_model];
        for row in dec.chunks_exact_mut(d_model) {
            row.iter_mut().for_each(|v| *v = r.random::<f32>() * 2.0 - 1.0);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let mut enc = vec![0f32; d_model * d_sae];
        for i in 0..d_sae {
            for j in 0..d_model {
                enc[j * d_sae + i] = dec[i * d_model + j];
            }
        }
        let mut p = ParamStore::new();
        let w_enc = p.add("w_enc", Tensor::new(&[d_model, d_sae], enc), false);
        let b_enc = p.add_const("b_enc", &[d_sae], 0.0, false);
        let w_dec = p.add("w_dec", Tensor::new(&[d_sae, d_model], dec), false);
        let b_dec = p.add_const("b_dec", &[d_model], 0.0, false);
        Ok(Self {
            d_model,
            d_sae,
            k,
            input_mean: vec![0.0; d_model],
            input_scale: 1.0,
            params: p,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    pub fn w_enc(&self) -> &Tensor<f32> {
        self.params.value(self.w_enc)
    }

    pub fn b_enc(&self) -> &[f32] {
        self.params.value(self.b_enc).data()
    }

    /// `[d_sae, d_model]`; row `i` is latent `i`'s direction.
    pub fn w_dec(&self) -> &Tensor<f32> {
        self.params.value(self.w_dec)
    }

    pub fn b_dec(&self) -> &[f32] {
        self.params.value(self.b_dec).data()
    }

    pub fn decoder_norms(&self) -> Vec<f32> {
        (0..self.d_sae).map(|i| self.w_dec().row(i).iter().map(|v| v * v).sum::<f32>().sqrt()).collect()
    }

    /// Maps raw rows into the normalized input space.
    pub fn normalize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let (n, d) = x.dims2();
        assert_eq!(d, self.d_model, "input width");
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (v, &m) in row.iter_mut().zip(&self.input_mean) {
                *v = (*v - m) / self.input_scale;
            }
        }
        Tensor::new(&[n, d], out)
    }

    /// Preactivations `(x - b_dec) W_enc + b_enc` for normalized rows.
    pub fn preactivations(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let (n, d) = x.dims2();
        let mut xc = x.data().to_vec();
        for row in xc.chunks_exact_mut(d) {
            row.iter_mut().zip(self.b_dec()).for_each(|(v, &b)| *v -= b);
        }
        let mut pre = Tensor::new(&[n, d], xc).matmul(self.w_enc());
        for row in pre.data_mut().chunks_exact_mut(self.d_sae) {
            row.iter_mut().zip(self.b_enc()).for_each(|(v, &b)| *v += b);
        }
        pre
    }

    /// TopK latents `[n, d_sae]` for normalized rows.
    pub fn encode(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut pre = self.preactivations(x);
        let norms = self.decoder_norms();
        let mut idx = Vec::with_capacity(self.d_sae);
        let mut keep = vec![0f32; self.d_sae];
        for row in pre.data_mut().chunks_exact_mut(self.d_sae) {
            topk_positive(row, self.k, Some(&norms), &mut idx);
            keep.fill(0.0);
            for &j in &idx {
                keep[j] = row[j];
            }
            row.copy_from_slice(&keep);
        }
        pre
    }

    /// `f W_dec + b_dec`.
    pub fn decode(&self, f: &Tensor<f32>) -> Tensor<f32> {
        let mut out = f.matmul(self.w_dec());
        for row in out.data_mut().chunks_exact_mut(self.d_model) {
            row.iter_mut().zip(self.b_dec()).for_each(|(v, &b)| *v += b);
        }
        out
    }

    /// Decoder output restricted to `cluster`, without `b_dec`, for each row of `f`.
    pub fn cluster_contribution(&self, f: &Tensor<f32>, cluster: &[usize]) -> Tensor<f32> {
        let (n, m) = f.dims2();
        assert_eq!(m, self.d_sae, "latent width");
        let mut out = vec![0f32; n * self.d_model];
        for (r, row) in f.data().chunks_exact(m).enumerate() {
            let o = &mut out[r * self.d_model..(r + 1) * self.d_model];
            for &j in cluster {
                assert!(j < self.d_sae, "latent {j} out of range");
                let a = row[j];
                if a != 0.0 {
                    o.iter_mut().zip(self.w_dec().row(j)).for_each(|(v, &w)| *v += a * w);
                }
            }
        }
        Tensor::new(&[n, self.d_model], out)
    }

    /// Rescales decoder rows to unit norm and the matching encoder columns
    /// and encoder biases inversely, leaving reconstructions unchanged.
    pub fn normalize_decoder(&mut self) {
        let norms = self.decoder_norms();
        let (d, m) = (self.d_model, self.d_sae);
        let dec = self.params.get_mut(self.w_dec).value.data_mut();
        for (i, row) in dec.chunks_exact_mut(d).enumerate() {
            if norms[i] > 0.0 {
                row.iter_mut().for_each(|v| *v /= norms[i]);
            }
        }
        let enc = self.params.get_mut(self.w_enc).value.data_mut();
        for row in enc.chunks_exact_mut(m) {
            row.iter_mut().zip(&norms).for_each(|(v, &n)| *v *= n);
        }
        let be = self.params.get_mut(self.b_enc).value.data_mut();
        be.iter_mut().zip(&norms).for_each(|(v, &n)| *v *= n);
    }

    /// Unit-norm decoder directions `[d_sae, d_model]` in f64.
    pub fn unit_directions(&self) -> Vec<Vec<f64>> {
        let norms = self.decoder_norms();
        (0..self.d_sae)
            .map(|i| self.w_dec().row(i).iter().map(|&v| if norms[i] > 0.0 { (v / norms[i]) as f64 } else { 0.0 }).collect())
            .collect()
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = SaeHeader {
            d_model: self.d_model,
            d_sae: self.d_sae,
            k: self.k,
            input_mean: self.input_mean.clone(),
            input_scale: self.input_scale,
            meta,
        };
        io::write_checkpoint(path, SAE_MAGIC, &header, &io::store_tensors(&self.params))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (h, tensors): (SaeHeader, _) = io::read_checkpoint(path, SAE_MAGIC)?;
        let mut sae = Self::new(h.d_model, h.d_sae, h.k, 0)?;
        sae.input_mean = h.input_mean;
        sae.input_scale = h.input_scale;
        io::load_into_store(path, &mut sae.params, tensors)?;
        Ok((sae, h.meta))
    }
}

/// Mean-centering vector and scale giving unit mean row norm.
fn fit_normalization(x: &Tensor<f32>) -> (Vec<f32>, f32) {
    let (n, d) = x.dims2();
    let mut mean = vec![0f64; d];
    for row in x.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut total = 0f64;
    for row in x.data().chunks_exact(d) {
        total += row.iter().zip(&mean).map(|(&v, &m)| (v as f64 - m).powi(2)).sum::<f64>().sqrt();
    }
    let scale = total / n as f64;
    (mean.iter().map(|&m| m as f32).collect(), if scale > 0.0 { scale as f32 } else { 1.0 })
}

/// Squared error per row of `x - x_hat`.
fn row_errors(x: &Tensor<f32>, xh: &Tensor<f32>) -> Vec<f64> {
    let (_, d) = x.dims2();
    x.data()
        .chunks_exact(d)
        .zip(xh.data().chunks_exact(d))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum())
        .collect()
}

/// Trains on raw rows `x` (`[n, d_model]`), holding out a seeded fraction.
pub fn train_sae(x: &Tensor<f32>, cfg: &SaeConfig, seed: u64) -> Result<(SaeModel, SaeMetrics)> {
    let (n, d) = x.dims2();
    if cfg.k == 0 || cfg.k > cfg.d_sae {
        return Err(Error::invalid(format!("k = {} must be in 1..={}", cfg.k, cfg.d_sae)));
    }
    if !x.all_finite() {
        return Err(Error::invalid("SAE input contains non-finite values"));
    }
    let mut split_rng = rng::stream(seed, "sae-split");
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split_rng);
    let n_val = ((n as f64 * cfg.heldout_frac).round() as usize).min(n.saturating_sub(1));
    let (val_rows, train_rows) = order.split_at(n_val);
    if train_rows.len() < cfg.batch {
        return Err(Error::InsufficientData(format!("{} training rows for batch {}", train_rows.len(), cfg.batch)));
    }
    let mut sae = SaeModel::new(d, cfg.d_sae, cfg.k, rng::derive_seed(seed, "sae-init"))?;
    let (mean, scale) = fit_normalization(&x.select_rows(train_rows));
    sae.input_mean = mean;
    sae.input_scale = scale;
    let xn = sae.normalize(x);

    let opt = AdamW::new(cfg.lr);
    let mut data_rng = rng::stream(seed, "sae-data");
    let mut last_active = vec![0usize; cfg.d_sae];
    let mut reinitialized = 0;
    let mut loss_curve = Vec::new();
    let mut batch_rows = vec![0usize; cfg.batch];
    for step in 0..cfg.steps {
        batch_rows.iter_mut().for_each(|r| *r = *train_rows.choose(&mut data_rng).expect("non-empty"));
        let xb = xn.select_rows(&batch_rows);
        let norms = sae.decoder_norms();
        let mut g = Graph::new();
        let xin = g.input(xb.clone());
        let bd = g.param(&sae.params, sae.b_dec);
        let neg_bd = g.scale(bd, -1.0);
        let xc = g.add_row(xin, neg_bd);
        let we = g.param(&sae.params, sae.w_enc);
        let be = g.param(&sae.params, sae.b_enc);
        let pre = g.matmul(xc, we);
        let pre = g.add_row(pre, be);
        let f = g.topk_relu(pre, cfg.k, Some(&norms));
        let wd = g.param(&sae.params, sae.w_dec);
        let rec = g.matmul(f, wd);
        let rec = g.add_row(rec, bd);
        let loss = g.mse(rec, xin);
        g.backward(loss).map_err(|source| Error::Training { step, source })?;
        sae.params.zero_grad();
        g.accumulate_param_grads(&mut sae.params);
        opt.step(&mut sae.params);
        sae.normalize_decoder();

        let fv = g.value(f);
        for row in fv.data().chunks_exact(cfg.d_sae) {
            for (j, &a) in row.iter().enumerate() {
                if a > 0.0 {
                    last_active[j] = step;
                }
            }
        }
        if step % 100 == 0 {
            loss_curve.push(g.value(loss).data()[0]);
        }
        if cfg.dead_after > 0 && step + 1 >= cfg.dead_after && (step + 1) % 250 == 0 {
            let dead: Vec<usize> = (0..cfg.d_sae).filter(|&j| step - last_active[j] >= cfg.dead_after).collect();
            if !dead.is_empty() {
                let errs = row_errors(&xb, g.value(rec));
                reinit_latents(&mut sae, &dead, &xb, g.value(rec), &errs);
                for &j in &dead {
                    last_active[j] = step;
                }
                reinitialized += dead.len();
                log::debug!("step {step}: reinitialized {} dead latents", dead.len());
            }
        }
    }

    let eval_rows: &[usize] = if val_rows.is_empty() { train_rows } else { val_rows };
    let xv = xn.select_rows(eval_rows);
    let fv = sae.encode(&xv);
    let xh = sae.decode(&fv);
    let errs = row_errors(&xv, &xh);
    let sse: f64 = errs.iter().sum();
    let vmean: Vec<f64> = (0..d).map(|j| (0..xv.dims2().0).map(|i| xv.row(i)[j] as f64).sum::<f64>() / xv.dims2().0 as f64).collect();
    let sst: f64 = (0..xv.dims2().0).map(|i| xv.row(i).iter().zip(&vmean).map(|(&v, &m)| (v as f64 - m).powi(2)).sum::<f64>()).sum();
    let mut fired = vec![false; cfg.d_sae];
    for row in fv.data().chunks_exact(cfg.d_sae) {
        row.iter().enumerate().filter(|(_, &a)| a > 0.0).for_each(|(j, _)| fired[j] = true);
    }
    let metrics = SaeMetrics {
        heldout_mse: sse / (xv.len() as f64),
        heldout_rel_error: if sst > 0.0 { sse / sst } else { 0.0 },
        dead_fraction: fired.iter().filter(|&&f| !f).count() as f64 / cfg.d_sae as f64,
        reinitialized,
        loss_curve,
    };
    if !sae.params.all_finite() || !metrics.heldout_mse.is_finite() {
        return Err(Error::Training { step: cfg.steps, source: belief_nn::NnError::NonFinite { op: "adamw" } });
    }
    Ok((sae, metrics))
}

/// Points dead latents at the residuals of the worst-reconstructed batch rows.
fn reinit_latents(sae: &mut SaeModel, dead: &[usize], xb: &Tensor<f32>, rec: &Tensor<f32>, errs: &[f64]) {
    let (d, m) = (sae.d_model, sae.d_sae);
    let mut worst: Vec<usize> = (0..errs.len()).collect();
    worst.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]).then(a.cmp(&b)));
    for (slot, &j) in dead.iter().enumerate() {
        let r = worst[slot % worst.len()];
        let resid: Vec<f32> = xb.row(r).iter().zip(rec.row(r)).map(|(&a, &b)| a - b).collect();
        let norm = resid.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm <= 0.0 {
            continue;
        }
        let dir: Vec<f32> = resid.iter().map(|v| v / norm).collect();
        let dec = sae.params.get_mut(sae.w_dec);
        dec.value.data_mut()[j * d..(j + 1) * d].copy_from_slice(&dir);
        dec.m.data_mut()[j * d..(j + 1) * d].fill(0.0);
        dec.v.data_mut()[j * d..(j + 1) * d].fill(0.0);
        let enc = sae.params.get_mut(sae.w_enc);
        for (i, &v) in dir.iter().enumerate() {
            enc.value.data_mut()[i * m + j] = v * 0.2;
            enc.m.data_mut()[i * m + j] = 0.0;
            enc.v.data_mut()[i * m + j] = 0.0;
        }
        let be = sae.params.get_mut(sae.b_enc);
        be.value.data_mut()[j] = 0.0;
        be.m.data_mut()[j] = 0.0;
        be.v.data_mut()[j] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::seeded(seed);
        Tensor::new(&[n, d], (0..n * d).map(|_| r.random::<f32>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn encode_has_at_most_k_nonzeros() {
        let sae = SaeModel::new(16, 64, 5, 1).unwrap();
        let f = sae.encode(&random_rows(10_000, 16, 2));
        for row in f.data().chunks_exact(64) {
            assert!(row.iter().filter(|&&a| a != 0.0).count() <= 5);
        }
    }

    #[test]
    fn encode_of_decoder_bias_is_topk_of_encoder_bias() {
        let mut sae = SaeModel::new(8, 16, 3, 1).unwrap();
        let be: Vec<f32> = (0..16).map(|i| (i as f32 - 6.0) * 0.1).collect();
        sae.params.get_mut(sae.b_enc).value.data_mut().copy_from_slice(&be);
        sae.params.get_mut(sae.b_dec).value.data_mut().copy_from_slice(&[0.5; 8]);
        let f = sae.encode(&Tensor::new(&[1, 8], vec![0.5; 8]));
        let nz: Vec<usize> = (0..16).filter(|&j| f.data()[j] != 0.0).collect();
        assert_eq!(nz, vec![13, 14, 15]);
        assert!((f.data()[15] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn cluster_contribution_is_linear_in_the_cluster() {
        let sae = SaeModel::new(8, 32, 8, 3).unwrap();
        let f = sae.encode(&random_rows(20, 8, 4));
        let all: Vec<usize> = (0..32).collect();
        let full = sae.cluster_contribution(&f, &all);
        let dec = sae.decode(&f);
        for (a, (b, bias)) in full.data().iter().zip(dec.data().iter().zip(sae.b_dec().iter().cycle())) {
            assert!((a - (b - bias)).abs() < 1e-5);
        }
        assert!(sae.cluster_contribution(&f, &[]).data().iter().all(|&v| v == 0.0));
        let (a, b): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&j| j % 3 == 0);
        let ca = sae.cluster_contribution(&f, &a);
        let cb = sae.cluster_contribution(&f, &b);
        for i in 0..full.len() {
            assert!((full.data()[i] - ca.data()[i] - cb.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_normalization_preserves_reconstructions() {
        let mut sae = SaeModel::new(8, 24, 4, 5).unwrap();
        let mut r = rng::seeded(6);
        let dec = sae.params.get_mut(sae.w_dec).value.data_mut();
        for row in dec.chunks_exact_mut(8) {
            let c: f32 = 0.3 + 3.0 * r.random::<f32>();
            row.iter_mut().for_each(|v| *v *= c);
        }
        let norms = sae.decoder_norms();
        let enc = sae.params.get_mut(sae.w_enc).value.data_mut();
        for row in enc.chunks_exact_mut(24) {
            row.iter_mut().zip(&norms).for_each(|(v, &n)| *v /= n);
        }
        let x = random_rows(500, 8, 7);
        let before = sae.decode(&sae.encode(&x));
        sae.normalize_decoder();
        let after = sae.decode(&sae.encode(&x));
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(sae.decoder_norms().iter().all(|n| (n - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_k_above_width() {
        assert!(SaeModel::new(8, 4, 5, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let x = random_rows(600, 8, 8);
        let cfg = SaeConfig { d_sae: 16, k: 3, steps: 20, batch: 32, ..SaeConfig::default() };
        let (sae, _) = train_sae(&x, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sae.bin");
        sae.save(&p, serde_json::json!({"layer": 1})).unwrap();
        let (back, meta) = SaeModel::load(&p).unwrap();
        assert_eq!(meta["layer"], 1);
        let xn = sae.normalize(&x);
        assert_eq!(back.encode(&back.normalize(&x)).data(), sae.encode(&xn).data());
    }
}
