// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::wilcoxon::{wilcoxon_one_sided, WilcoxonResult};
use crate::linalg::{cv_r2, kfold_assign, select_rows};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaryConfig {
    pub n_tokens: usize,
    pub folds: usize,
    pub ridge: f64,
    /// Minimum rows in the split.
    pub min_rows: usize,
}

impl Default for BaryConfig {
    fn default() -> Self {
        Self { n_tokens: 50, folds: 5, ridge: 1e-6, min_rows: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenR2 {
    pub token: usize,
    pub r2_bary: f64,
    pub r2_best_latent: f64,
    pub best_latent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaryAdvantageResult {
    pub n_rows: usize,
    pub tokens: Vec<TokenR2>,
    pub frac_wins: f64,
    pub wilcoxon: WilcoxonResult,
    /// Tokens dropped for having constant log-probability over the rows.
    pub skipped_constant: Vec<usize>,
}

impl BaryAdvantageResult {
    pub fn p(&self) -> f64 {
        self.wilcoxon.p
    }
}

/// Compares out-of-fold R² of a linear model on the barycentric coordinates
/// with the best single-latent linear model, per high-variance token.
///
/// `rows` index into `bary` `[n, K]`, `latents` `[n, m]` and `logprobs`
/// `[n, vocab]`. `strata` (one label per entry of `rows`) stratifies folds.
pub fn bary_advantage(
    rows: &[usize],
    strata: Option<&[usize]>,
    bary: &DMatrix<f64>,
    latents: &DMatrix<f64>,
    logprobs: &DMatrix<f64>,
    cfg: &BaryConfig,
    seed: u64,
) -> Result<BaryAdvantageResult> {
    let n = rows.len();
    if n < cfg.min_rows.max(cfg.folds) {
        return Err(Error::InsufficientData(format!("{n} rows; need {}", cfg.min_rows.max(cfg.folds))));
    }
    if bary.nrows() != latents.nrows() || bary.nrows() != logprobs.nrows() {
        return Err(Error::invalid("bary, latents and logprobs disagree on row count"));
    }
    if strata.is_some_and(|s| s.len() != n) {
        return Err(Error::invalid("strata length differs from rows"));
    }
    if latents.ncols() == 0 {
        return Err(Error::invalid("no latents"));
    }
    let x = select_rows(bary, rows);
    let z = select_rows(latents, rows);
    let lp = select_rows(logprobs, rows);

    let mut var: Vec<(usize, f64)> = lp
        .column_iter()
        .enumerate()
        .map(|(t, c)| {
            let mean = c.mean();
            (t, c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        })
        .collect();
    var.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut skipped_constant = Vec::new();
    let mut chosen = Vec::new();
    for &(t, v) in &var {
        if chosen.len() == cfg.n_tokens {
            break;
        }
        if v > 1e-24 {
            chosen.push(t);
        } else {
            skipped_constant.push(t);
        }
    }
    if !skipped_constant.is_empty() {
        log::info!("skipped {} constant tokens", skipped_constant.len());
    }
    if chosen.len() < cfg.n_tokens {
        log::warn!("only {} usable tokens of {} requested", chosen.len(), cfg.n_tokens);
    }
    if chosen.len() < 5 {
        return Err(Error::InsufficientData(format!("{} tokens with varying log-probability", chosen.len())));
    }
    let y = DMatrix::from_fn(n, chosen.len(), |i, j| lp[(i, chosen[j])]);

    let mut r = rng::stream(seed, "bary-folds");
    let folds = kfold_assign(n, cfg.folds, strata, &mut r);
    let latent_r2 = univariate_cv_r2(&z, &y, &folds, cfg.folds, cfg.ridge);

    let mut tokens = Vec::with_capacity(chosen.len());
    for (j, &t) in chosen.iter().enumerate() {
        let yj = y.columns(j, 1).into_owned();
        let rb = cv_r2(&x, &yj, &folds, cfg.folds, cfg.ridge).unwrap_or(f64::NEG_INFINITY);
        let (best_latent, rl) = (0..z.ncols())
            .map(|l| (l, latent_r2[(l, j)]))
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        tokens.push(TokenR2 { token: t, r2_bary: rb, r2_best_latent: rl, best_latent });
    }
    let wins = tokens.iter().filter(|t| t.r2_bary > t.r2_best_latent).count();
    let a: Vec<f64> = tokens.iter().map(|t| t.r2_bary).collect();
    let b: Vec<f64> = tokens.iter().map(|t| t.r2_best_latent).collect();
    let wilcoxon = wilcoxon_one_sided(&a, &b)?;
    Ok(BaryAdvantageResult { n_rows: n, frac_wins: wins as f64 / tokens.len() as f64, tokens, wilcoxon, skipped_constant })
}

/// Out-of-fold R² of every single-column regression `y[:, t] ~ z[:, l]`,
/// returned as `[latents, targets]`. The ridge is relative to the fold
/// variance so the result is invariant to affine rescaling of a column.
fn univariate_cv_r2(z: &DMatrix<f64>, y: &DMatrix<f64>, folds: &[usize], k: usize, ridge: f64) -> DMatrix<f64> {
    let (n, m) = z.shape();
    let q = y.ncols();
    let mut ss_res = DMatrix::<f64>::zeros(m, q);
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let zt = select_rows(z, &train);
        let yt = select_rows(y, &train);
        let zm: Vec<f64> = zt.column_iter().map(|c| c.mean()).collect();
        let ym: Vec<f64> = yt.column_iter().map(|c| c.mean()).collect();
        let mut zc = zt;
        for (j, mut c) in zc.column_iter_mut().enumerate() {
            c.add_scalar_mut(-zm[j]);
        }
        let mut yc = yt;
        for (j, mut c) in yc.column_iter_mut().enumerate() {
            c.add_scalar_mut(-ym[j]);
        }
        let zvar: Vec<f64> = zc.column_iter().map(|c| c.norm_squared()).collect();
        let cov = zc.transpose() * &yc;
        let slope = DMatrix::from_fn(m, q, |l, t| if zvar[l] > 0.0 { cov[(l, t)] / (zvar[l] * (1.0 + ridge)) } else { 0.0 });
        for &i in &test {
            for l in 0..m {
                let dz = z[(i, l)] - zm[l];
                for t in 0..q {
                    let e = y[(i, t)] - ym[t] - slope[(l, t)] * dz;
                    ss_res[(l, t)] += e * e;
                }
            }
        }
    }
    let ss_tot: Vec<f64> = y
        .column_iter()
        .map(|c| {
            let mu = c.mean();
            c.iter().map(|v| (v - mu).powi(2)).sum()
        })
        .collect();
    DMatrix::from_fn(m, q, |l, t| if ss_tot[t] > 0.0 { 1.0 - ss_res[(l, t)] / ss_tot[t] } else { f64::NEG_INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn univariate_matches_ridge_fit() {
        let mut r = rng::seeded(3);
        let z = DMatrix::from_fn(60, 2, |_, _| r.random::<f64>());
        let y = DMatrix::from_fn(60, 1, |i, _| 3.0 * z[(i, 1)] + r.random::<f64>());
        let folds = kfold_assign(60, 5, None, &mut r);
        let uni = univariate_cv_r2(&z, &y, &folds, 5, 0.0);
        let full = cv_r2(&z.columns(1, 1).into_owned(), &y, &folds, 5, 0.0).unwrap();
        assert!((uni[(1, 0)] - full).abs() < 1e-10);
    }
}
