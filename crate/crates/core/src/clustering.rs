// SPDX-License-Identifier: MIT OR Apache-2.0

//! k-subspace clustering of unit-norm directions with CPQR seeding, rank
//! estimation, and random null partitions.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{io, linalg, rng, Error, Result};

pub const BASIS_MAGIC: &[u8; 4] = b"BGCB";

/// Rows with smaller norm are left unassigned.
pub const MIN_ROW_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub r_max: usize,
    pub max_iters: usize,
    /// Spectral-energy fraction for rank estimation.
    pub tau: f64,
    pub min_rank: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 6, r_max: 3, max_iters: 100, tau: 0.90, min_rank: 3 }
    }
}

/// Initial subspaces for [`k_subspace`].
#[derive(Debug, Clone)]
pub enum Init {
    /// First `K` CPQR pivots.
    Cpqr,
    /// `K` distinct rows drawn with the given seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub k: usize,
    /// Cluster id per row; `None` for dropped rows.
    pub assignments: Vec<Option<usize>>,
    /// Orthonormal `[d, r_c]` basis per cluster.
    pub bases: Vec<DMatrix<f64>>,
    /// Post-hoc rank estimate per cluster.
    pub ranks: Vec<usize>,
    /// Sum of squared residuals after each assignment step.
    pub objective: Vec<f64>,
    /// Assignment steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Empty clusters reseeded during alternation.
    pub reseeds: usize,
}

impl ClusterSet {
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == Some(c)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|c| self.members(c).len()).collect()
    }
}

fn rows_to_matrix(w: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = w.first().map_or(0, Vec::len);
    if w.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("direction rows have unequal lengths"));
    }
    Ok(DMatrix::from_fn(w.len(), d, |i, j| w[i][j]))
}

/// Orders equal-norm rows by content, so pivots do not depend on row order.
fn row_order(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| y.total_cmp(x)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Pivot order of a column-pivoted Householder QR of `W^T`, truncated to
/// `k` pivots. Ties in residual norm go to the lexicographically larger row.
pub fn cpqr_pivots(w: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let m = w.len();
    if k > m {
        return Err(Error::Seeding { requested: k, rank: m });
    }
    // columns of A = W^T are the rows of W
    let mut a: Vec<Vec<f64>> = w.to_vec();
    let d = a.first().map_or(0, Vec::len);
    let mut norms: Vec<f64> = a.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    let tol = scale * 1e-20 * (m.max(d) as f64);
    let mut perm: Vec<usize> = (0..m).collect();
    for step in 0..k {
        let mut best = step;
        for j in step + 1..m {
            if norms[j] > norms[best] || (norms[j] == norms[best] && row_order(&w[perm[j]], &w[perm[best]]).is_lt()) {
                best = j;
            }
        }
        if step >= d || norms[best] <= tol.max(f64::MIN_POSITIVE) {
            return Err(Error::Seeding { requested: k, rank: step });
        }
        a.swap(step, best);
        norms.swap(step, best);
        perm.swap(step, best);
        // Householder reflector zeroing a[step][step+1..]
        let x = &a[step][step..];
        let alpha = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if x[0] > 0.0 { -alpha } else { alpha };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn: f64 = v.iter().map(|t| t * t).sum();
        if vn > 0.0 {
            for j in step..m {
                let col = &mut a[j][step..];
                let dot: f64 = col.iter().zip(&v).map(|(c, t)| c * t).sum();
                let f = 2.0 * dot / vn;
                col.iter_mut().zip(&v).for_each(|(c, t)| *c -= f * t);
            }
        }
        for j in step + 1..m {
            norms[j] = a[j][step + 1..].iter().map(|v| v * v).sum();
        }
    }
    Ok(perm[..k].to_vec())
}

/// One-dimensional seed subspaces from the first `k` CPQR pivots.
pub fn cpqr_seed(w: &[Vec<f64>], k: usize) -> Result<Vec<DMatrix<f64>>> {
    let piv = cpqr_pivots(w, k)?;
    Ok(piv.iter().map(|&i| unit_column(&w[i])).collect())
}

fn unit_column(v: &[f64]) -> DMatrix<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    DMatrix::from_fn(v.len(), 1, |i, _| v[i] / n)
}

/// Squared distance from `x` to the span of orthonormal `b`.
fn residual2(x: &DMatrix<f64>, xx: f64, b: &DMatrix<f64>) -> f64 {
    if b.ncols() == 0 {
        return xx;
    }
    let p = b.tr_mul(x);
    (xx - p.norm_squared()).max(0.0)
}

/// Alternating k-subspace clustering of the rows of `w`.
pub fn k_subspace(w: &[Vec<f64>], k: usize, r_max: usize, max_iters: usize, init: &Init, tau: f64) -> Result<ClusterSet> {
    if r_max == 0 || k == 0 {
        return Err(Error::invalid("k and r_max must be at least 1"));
    }
    let x = rows_to_matrix(w)?;
    let (m, d) = (x.nrows(), x.ncols());
    let cols: Vec<DMatrix<f64>> = (0..m).map(|i| DMatrix::from_fn(d, 1, |r, _| x[(i, r)])).collect();
    let sq: Vec<f64> = cols.iter().map(|c| c.norm_squared()).collect();
    let usable: Vec<usize> = (0..m).filter(|&i| sq[i].sqrt() >= MIN_ROW_NORM).collect();
    if usable.len() < m {
        log::info!("dropping {} rows with norm below {MIN_ROW_NORM}", m - usable.len());
    }
    let kept: Vec<Vec<f64>> = usable.iter().map(|&i| w[i].clone()).collect();
    let mut bases = match init {
        Init::Cpqr => cpqr_seed(&kept, k)?,
        Init::Random(seed) => {
            if k > kept.len() {
                return Err(Error::Seeding { requested: k, rank: kept.len() });
            }
            let mut r = rng::seeded(*seed);
            let picks = rand::seq::index::sample(&mut r, kept.len(), k);
            picks.iter().map(|i| unit_column(&kept[i])).collect()
        }
    };

    let mut assign: Vec<Option<usize>> = vec![None; m];
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut reseeds = 0;
    for it in 0..max_iters.max(1) {
        let mut next = vec![None; m];
        let mut obj = 0.0;
        let mut fit = vec![0.0; m];
        for &i in &usable {
            let mut best = 0;
            let mut best_r = f64::INFINITY;
            for (c, b) in bases.iter().enumerate() {
                let r = residual2(&cols[i], sq[i], b);
                if r < best_r {
                    best_r = r;
                    best = c;
                }
            }
            next[i] = Some(best);
            fit[i] = best_r;
            obj += best_r;
        }
        iterations = it + 1;
        objective.push(obj);
        let same = next == assign;
        assign = next;
        if same {
            converged = true;
            break;
        }
        if it + 1 == max_iters.max(1) {
            break;
        }
        let mut taken: Vec<usize> = Vec::new();
        for (c, basis) in bases.iter_mut().enumerate() {
            let members: Vec<usize> = usable.iter().copied().filter(|&i| assign[i] == Some(c)).collect();
            if members.is_empty() {
                let worst = usable
                    .iter()
                    .copied()
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(b.cmp(&a)))
                    .expect("more rows than clusters");
                log::info!("cluster {c} empty at iteration {it}; reseeding from row {worst}");
                taken.push(worst);
                reseeds += 1;
                *basis = unit_column(&w[worst]);
                continue;
            }
            let mat = DMatrix::from_fn(d, members.len(), |r, j| x[(members[j], r)]);
            *basis = linalg::top_left_singular(&mat, r_max, 1e-12);
        }
    }
    let mut set = ClusterSet { k, assignments: assign, bases, ranks: vec![], objective, iterations, converged, reseeds };
    set.ranks = (0..k)
        .map(|c| {
            let mem = set.members(c);
            if mem.is_empty() {
                0
            } else {
                estimate_rank(&linalg::select_rows(&x, &mem), tau)
            }
        })
        .collect();
    Ok(set)
}

/// Smallest `r` whose top-`r` squared singular values reach a `tau`
/// fraction of the total; 0 for an all-zero matrix.
pub fn estimate_rank(members: &DMatrix<f64>, tau: f64) -> usize {
    let s = linalg::singular_values(members);
    let e: Vec<f64> = s.iter().map(|v| v * v).collect();
    let total: f64 = e.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, v) in e.iter().enumerate() {
        acc += v;
        if acc >= tau * total * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    e.len()
}

/// Random partitions matched to a real size distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullClusters {
    /// Retained member lists.
    pub clusters: Vec<Vec<usize>>,
    /// Sizes of the retained clusters' source slots.
    pub sizes: Vec<usize>,
    pub attempted: usize,
    pub retained: usize,
}

/// Draws `attempts` random partitions of `0..n_latents` into groups with the
/// given sizes and keeps each group that passes `screen`.
pub fn make_null_clusters(
    n_latents: usize,
    sizes: &[usize],
    attempts: usize,
    seed: u64,
    mut screen: impl FnMut(&[usize]) -> Result<bool>,
) -> Result<NullClusters> {
    let total: usize = sizes.iter().sum();
    if total > n_latents {
        return Err(Error::invalid(format!("sizes sum to {total} > {n_latents} latents")));
    }
    let mut r = rng::stream(seed, "null-clusters");
    let mut out = NullClusters { clusters: vec![], sizes: vec![], attempted: 0, retained: 0 };
    let mut ids: Vec<usize> = (0..n_latents).collect();
    for _ in 0..attempts {
        ids.shuffle(&mut r);
        let mut off = 0;
        for &s in sizes {
            let mut g = ids[off..off + s].to_vec();
            off += s;
            g.sort_unstable();
            out.attempted += 1;
            if s > 0 && screen(&g)? {
                out.retained += 1;
                out.clusters.push(g);
                out.sizes.push(s);
            }
        }
    }
    if out.retained == 0 {
        log::warn!("no null cluster passed screening in {} attempts", out.attempted);
    }
    Ok(out)
}

/// Rank screen on the selected rows of `w`.
pub fn rank_screen(w: &[Vec<f64>], members: &[usize], tau: f64, min_rank: usize) -> bool {
    if members.is_empty() {
        return false;
    }
    let d = w[0].len();
    let m = DMatrix::from_fn(members.len(), d, |i, j| w[members[i]][j]);
    estimate_rank(&m, tau) >= min_rank
}

/// Uniform random rows on the unit sphere, for tests and null draws.
pub fn random_unit_rows<R: Rng + ?Sized>(n: usize, d: usize, r: &mut R) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    k: usize,
    ranks: Vec<usize>,
    objective: Vec<f64>,
    iterations: usize,
    converged: bool,
    meta: serde_json::Value,
}

/// Writes `latent_id\tcluster_id` rows (`-` for unassigned) to `tsv` and
/// the bases to a binary blob.
pub fn write_cluster_files(set: &ClusterSet, tsv: &Path, bases: &Path, meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "latent_id\tcluster_id")?;
    for (i, a) in set.assignments.iter().enumerate() {
        match a {
            Some(c) => writeln!(buf, "{i}\t{c}")?,
            None => writeln!(buf, "{i}\t-")?,
        }
    }
    io::write_atomic(tsv, &buf)?;
    let tensors: Vec<(String, belief_nn::Tensor<f32>)> = set
        .bases
        .iter()
        .enumerate()
        .filter(|(_, b)| b.ncols() > 0)
        .map(|(c, b)| {
            let data: Vec<f32> = (0..b.nrows()).flat_map(|i| (0..b.ncols()).map(move |j| b[(i, j)] as f32)).collect();
            (format!("basis.{c}"), belief_nn::Tensor::new(&[b.nrows(), b.ncols()], data))
        })
        .collect();
    let refs: Vec<(String, &belief_nn::Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    let header = BasisHeader {
        k: set.k,
        ranks: set.ranks.clone(),
        objective: set.objective.clone(),
        iterations: set.iterations,
        converged: set.converged,
        meta,
    };
    io::write_checkpoint(bases, BASIS_MAGIC, &header, &refs)
}

/// Reads files written by [`write_cluster_files`]. Bases come back in f32 precision.
pub fn read_cluster_files(tsv: &Path, bases: &Path) -> Result<(ClusterSet, serde_json::Value)> {
    let text = std::fs::read_to_string(tsv)?;
    let mut assignments = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let mut it = line.split('\t');
        let (Some(id), Some(c)) = (it.next(), it.next()) else {
            return Err(Error::Format { path: tsv.to_path_buf(), msg: format!("line {} malformed", ln + 1) });
        };
        let bad = |_| Error::Format { path: tsv.to_path_buf(), msg: format!("line {} malformed", ln + 1) };
        let id: usize = id.parse().map_err(bad)?;
        if id != assignments.len() {
            return Err(Error::Format { path: tsv.to_path_buf(), msg: format!("latent ids out of order at line {}", ln + 1) });
        }
        assignments.push(if c == "-" { None } else { Some(c.parse().map_err(bad)?) });
    }
    let (h, tensors): (BasisHeader, _) = io::read_checkpoint(bases, BASIS_MAGIC)?;
    let mut bs = vec![DMatrix::zeros(0, 0); h.k];
    for (name, t) in tensors {
        let c: usize = name
            .strip_prefix("basis.")
            .and_then(|s| s.parse().ok())
            .filter(|&c| c < h.k)
            .ok_or_else(|| Error::Format { path: bases.to_path_buf(), msg: format!("unexpected tensor {name}") })?;
        let (r, q) = t.dims2();
        bs[c] = DMatrix::from_fn(r, q, |i, j| t.row(i)[j] as f64);
    }
    let set = ClusterSet {
        k: h.k,
        assignments,
        bases: bs,
        ranks: h.ranks,
        objective: h.objective,
        iterations: h.iterations,
        converged: h.converged,
        reseeds: 0,
    };
    Ok((set, h.meta))
}
