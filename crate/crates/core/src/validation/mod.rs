// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistics that separate genuine simplex geometry from tiling artifacts:
//! sample splits, barycentric predictive advantage, symmetric-KL ratios,
//! ground-truth recovery, and steering against the belief oracle.

mod bary;
mod kl;
mod recovery;
mod steering;
mod wilcoxon;

pub use bary::{bary_advantage, BaryAdvantageResult, BaryConfig, TokenR2};
pub use kl::{kl_ratio, symmetric_kl, KlResult, KL_SMOOTHING};
pub use recovery::{recovery_r2, RecoveryResult};
pub use steering::{steering_score, PairScore, SteeringConfig, SteeringResult, SteeringTarget};
pub use wilcoxon::{mid_ranks, wilcoxon_one_sided, WilcoxonResult, EXACT_MAX_N};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub vertex_threshold: f64,
    pub interior_threshold: f64,
    pub cap: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { vertex_threshold: 0.80, interior_threshold: 0.60, cap: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSplit {
    /// Row ids per vertex, capped and sorted.
    pub near_vertex: Vec<Vec<usize>>,
    /// Interior row ids, capped at `cap * K` and sorted.
    pub interior: Vec<usize>,
    /// Near-vertex counts before capping.
    pub vertex_counts: Vec<usize>,
    pub interior_count: usize,
    /// Vertices with no near-vertex rows.
    pub empty_vertices: Vec<usize>,
    pub config: SplitConfig,
}

impl SampleSplit {
    /// All near-vertex rows with their vertex labels.
    pub fn labelled_near_vertex(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (v, r) in self.near_vertex.iter().enumerate() {
            rows.extend_from_slice(r);
            labels.extend(std::iter::repeat_n(v, r.len()));
        }
        (rows, labels)
    }
}

/// Tolerance on barycentric sums and signs.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Splits rows of `bary` (`n` rows of `K` coordinates) into near-vertex and
/// interior sets and subsamples them deterministically.
pub fn split_samples(bary: &[Vec<f64>], cfg: &SplitConfig, seed: u64) -> Result<SampleSplit> {
    let k = bary.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(Error::invalid("need at least two barycentric coordinates"));
    }
    if !(cfg.interior_threshold < cfg.vertex_threshold) {
        return Err(Error::invalid("interior threshold must be below the vertex threshold"));
    }
    let mut near: Vec<Vec<usize>> = vec![vec![]; k];
    let mut interior = Vec::new();
    for (i, row) in bary.iter().enumerate() {
        if row.len() != k || row.iter().any(|&v| v < -SIMPLEX_TOL) || (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("row {i} is not on the simplex")));
        }
        let (arg, mx) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        if mx >= cfg.vertex_threshold {
            near[arg].push(i);
        } else if mx <= cfg.interior_threshold {
            interior.push(i);
        }
    }
    let mut r = rng::stream(seed, "split");
    let mut cap = |mut rows: Vec<usize>, c: usize| {
        if rows.len() > c {
            rows.shuffle(&mut r);
            rows.truncate(c);
            rows.sort_unstable();
        }
        rows
    };
    let vertex_counts: Vec<usize> = near.iter().map(Vec::len).collect();
    let interior_count = interior.len();
    let near_vertex: Vec<Vec<usize>> = near.into_iter().map(|v| cap(v, cfg.cap)).collect();
    let interior = cap(interior, cfg.cap * k);
    let empty_vertices: Vec<usize> = (0..k).filter(|&v| vertex_counts[v] == 0).collect();
    if !empty_vertices.is_empty() {
        log::warn!("vertices without near-vertex samples: {empty_vertices:?}");
    }
    Ok(SampleSplit { near_vertex, interior, vertex_counts, interior_count, empty_vertices, config: cfg.clone() })
}

/// Minimum share for a latent to count as active at a vertex.
pub const PIE_ACTIVE_SHARE: f64 = 0.01;

/// `shares[v][j]`: mean activation of latent `j` over the near-vertex rows of
/// vertex `v`, as a fraction of the summed means of all latents at `v`.
/// Rows of `latents` (`[n, m]`) are indexed like the split.
pub fn latent_vertex_shares(split: &SampleSplit, latents: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = latents.first().map_or(0, Vec::len);
    split
        .near_vertex
        .iter()
        .map(|rows| {
            let mut mean = vec![0.0; m];
            for &i in rows {
                mean.iter_mut().zip(&latents[i]).for_each(|(a, &v)| *a += v.max(0.0) / rows.len() as f64);
            }
            let total: f64 = mean.iter().sum();
            if total > 0.0 {
                mean.iter().map(|v| v / total).collect()
            } else {
                vec![0.0; m]
            }
        })
        .collect()
}
