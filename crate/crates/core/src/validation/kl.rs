// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SampleSplit;
use crate::{rng, Error, Result};

/// Mass added to every entry before renormalizing.
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlResult {
    pub ratio: f64,
    pub cross_mean: f64,
    pub same_mean: f64,
    pub cross_pairs: usize,
    pub same_pairs: usize,
    /// Every pair was evaluated rather than sampled.
    pub exhaustive: bool,
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().map(|v| v.max(0.0) + KL_SMOOTHING).sum();
    p.iter().map(|v| (v.max(0.0) + KL_SMOOTHING) / total).collect()
}

/// `KL(p||q) + KL(q||p)` after smoothing both arguments.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    let p = smooth(p);
    let q = smooth(q);
    p.iter().zip(&q).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum()
}

/// Mean cross-vertex over mean same-vertex symmetric KL between the
/// next-token distributions of near-vertex rows.
///
/// Pairs are drawn uniformly from all unordered pairs of split rows (taken in
/// row-id order) until each arm holds `budget` pairs, so the result does not
/// depend on how vertices are numbered. `dist(row)` is the next-token
/// distribution of a split row.
pub fn kl_ratio(split: &SampleSplit, mut dist: impl FnMut(usize) -> Result<Vec<f64>>, budget: usize, seed: u64) -> Result<KlResult> {
    let (rows, labels) = split.labelled_near_vertex();
    let populated = split.near_vertex.iter().filter(|v| !v.is_empty()).count();
    if populated < 2 {
        return Err(Error::InsufficientData(format!("{populated} populated vertices; need 2")));
    }
    if budget == 0 {
        return Err(Error::invalid("pair budget must be positive"));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i]);
    let rows: Vec<usize> = order.iter().map(|&i| rows[i]).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let smoothed: Vec<Vec<f64>> = rows.iter().map(|&r| dist(r).map(|d| smooth(&d))).collect::<Result<_>>()?;
    let skl = |i: usize, j: usize| -> f64 { smoothed[i].iter().zip(&smoothed[j]).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum() };

    let n = rows.len();
    let total_pairs = n * (n - 1) / 2;
    let (mut cross, mut same) = ((0.0, 0usize), (0.0, 0usize));
    let add = |i: usize, j: usize, cross: &mut (f64, usize), same: &mut (f64, usize)| {
        let arm = if labels[i] == labels[j] { same } else { cross };
        if arm.1 < budget {
            arm.0 += skl(i, j);
            arm.1 += 1;
        }
    };
    let exhaustive = total_pairs <= 2 * budget;
    if exhaustive {
        for i in 0..n {
            for j in i + 1..n {
                add(i, j, &mut cross, &mut same);
            }
        }
    } else {
        let mut r = rng::stream(seed, "kl-pairs");
        let max_draws = 50 * budget;
        let mut draws = 0;
        while (cross.1 < budget || same.1 < budget) && draws < max_draws {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n - 1);
            let j = if j >= i { j + 1 } else { j };
            add(i.min(j), i.max(j), &mut cross, &mut same);
            draws += 1;
        }
    }
    if same.1 == 0 || cross.1 == 0 {
        return Err(Error::InsufficientData("no same-vertex or no cross-vertex pairs".into()));
    }
    let same_mean = same.0 / same.1 as f64;
    let cross_mean = cross.0 / cross.1 as f64;
    if same_mean <= 0.0 {
        return Err(Error::UndefinedRatio(format!("same-vertex mean KL is {same_mean}")));
    }
    Ok(KlResult { ratio: cross_mean / same_mean, cross_mean, same_mean, cross_pairs: cross.1, same_pairs: same.1, exhaustive })
}
