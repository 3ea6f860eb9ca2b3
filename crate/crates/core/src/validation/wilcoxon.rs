// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided paired Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Largest number of non-zero differences handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `P(W+ >= observed)` under the null; alternative `a > b`.
    pub p: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p` is 1.
    pub all_zero: bool,
}

/// Mid-ranks of `v` (1-based); tied values share the mean of their ranks.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Tests H1: `a` tends to exceed `b`.
///
/// Zero differences are dropped and ties mid-ranked. For `n <= 25` the null
/// distribution of `W+` is enumerated exactly over the (doubled, hence
/// integral) mid-ranks; above that a normal approximation with tie and
/// continuity corrections is used.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 5 {
        return Err(Error::InsufficientData(format!("{} pairs; need at least 5", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Ok(WilcoxonResult { p: 1.0, w_plus: 0.0, n: 0, exact: true, all_zero: true });
    }
    let (p, w_plus, exact) = signed_rank_p(&d, d.len() <= EXACT_MAX_N);
    Ok(WilcoxonResult { p, w_plus, n: d.len(), exact, all_zero: false })
}

/// Upper-tail p-value of `W+` for non-zero differences `d`.
fn signed_rank_p(d: &[f64], exact: bool) -> (f64, f64, bool) {
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if exact {
        let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = twice.iter().sum();
        // counts[s] = number of sign patterns with doubled positive-rank sum s
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &twice {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let obs = (2.0 * w_plus).round() as usize;
        let tail: f64 = counts[obs..].iter().sum();
        let p = tail / 2f64.powi(n as i32);
        return (p.clamp(f64::MIN_POSITIVE, 1.0), w_plus, true);
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let p = Normal::standard().sf(z);
    (p.clamp(f64::MIN_POSITIVE, 1.0), w_plus, false)
}
