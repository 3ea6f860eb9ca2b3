// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic generators shared by the integration tests.
#![allow(dead_code)]

use belief_geometry::rng;
use belief_nn::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub fn gauss(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn simplex_rows(n: usize, k: usize, r: &mut impl Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, k);
    for i in 0..n {
        let e: Vec<f64> = (0..k).map(|_| Exp1.sample(r)).collect();
        let s: f64 = e.iter().sum();
        for j in 0..k {
            m[(i, j)] = e[j] / s;
        }
    }
    m
}

pub fn argmax_labels(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter().map(|r| r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b })).collect()
}

/// Log-probabilities linear in the barycentric coordinates; latents carry no signal.
pub fn genuine_mixture(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng::seeded(seed);
    let n = 600;
    let bary = simplex_rows(n, 3, &mut r);
    let a = DMatrix::from_fn(3, 80, |_, _| StandardNormal.sample(&mut r));
    let noise = DMatrix::from_fn(n, 80, |_, _| 0.01 * gauss(&mut r));
    let lp = &bary * a + noise;
    let latents = DMatrix::from_fn(n, 12, |_, _| r.random::<f64>());
    (bary, latents, lp)
}

/// One latent drives everything; the barycentric coordinates are a curved
/// function of it.
pub fn tiling(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng::seeded(seed);
    let n = 600;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let mut bary = DMatrix::zeros(n, 3);
    for i in 0..n {
        let z = [2.0 * (4.0 * x[i]).cos(), 2.0 * (4.0 * x[i]).sin(), 0.0];
        let e: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..3 {
            bary[(i, j)] = e[j] / s;
        }
    }
    let slopes: Vec<f64> = (0..80).map(|_| StandardNormal.sample(&mut r)).collect();
    let lp = DMatrix::from_fn(n, 80, |i, t| slopes[t] * x[i] + 1e-3 * gauss(&mut r));
    let latents = DMatrix::from_fn(n, 6, |i, j| if j == 0 { x[i] } else { r.random::<f64>() });
    (bary, latents, lp)
}

pub struct Simplex {
    pub verts: Vec<Vec<f32>>,
    pub weights: Vec<Vec<f64>>,
    pub x: Tensor<f32>,
}

pub fn simplex_data(k: usize, d: usize, n: usize, seed: u64, warp: bool) -> Simplex {
    let mut r = rng::seeded(seed);
    let verts: Vec<Vec<f32>> = loop {
        let v: Vec<Vec<f32>> = (0..k).map(|_| (0..d).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()).collect();
        let ok = (0..k).all(|i| (i + 1..k).all(|j| dist(&v[i], &v[j]) >= 1.0));
        if ok {
            break v;
        }
    };
    // flat Dirichlet via normalized exponentials
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut r)).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for w in &weights {
        for j in 0..d {
            let v: f32 = (0..k).map(|i| w[i] as f32 * verts[i][j]).sum();
            data.push(if warp { v + 0.5 * v.sin() } else { v });
        }
    }
    Simplex { verts, weights, x: Tensor::new(&[n, d], data) }
}

pub fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f32>().sqrt()
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}


/// Unit rows drawn from `k` mutually orthogonal, randomly oriented
/// `rank`-dimensional subspaces of R^d, `per` rows each, with isotropic noise
/// `sigma` added before normalizing.
pub fn union_of_subspaces(k: usize, rank: usize, per: usize, d: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    assert!(k * rank <= d);
    let mut r = rng::seeded(seed);
    let frame = DMatrix::from_fn(d, k * rank, |_, _| gauss(&mut r)).qr().q();
    let mut rows = Vec::with_capacity(k * per);
    let mut labels = Vec::with_capacity(k * per);
    for c in 0..k {
        let basis = frame.columns(c * rank, rank);
        for _ in 0..per {
            let coef: Vec<f64> = (0..rank).map(|_| gauss(&mut r)).collect();
            let mut v: Vec<f64> = (0..d).map(|i| (0..rank).map(|j| basis[(i, j)] * coef[j]).sum::<f64>() + sigma * gauss(&mut r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
            labels.push(c);
        }
    }
    (rows, labels)
}

/// Fraction of rows whose assignment matches `labels` under the best
/// relabeling of `k` clusters.
pub fn best_permutation_accuracy(assign: &[Option<usize>], labels: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|p| assign.iter().zip(labels).filter(|(a, &l)| **a == Some(p[l])).count())
        .max()
        .unwrap_or(0) as f64
        / labels.len() as f64
}

/// A pipeline configuration small enough to run end to end in under a minute.
pub fn small_config() -> belief_geometry::pipeline::PipelineConfig {
    let mut c = belief_geometry::pipeline::PipelineConfig::default();
    c.seed = 3;
    c.data.capture_sequences = 200;
    c.data.eval_sequences = 128;
    c.lm.steps = 100;
    c.lm.eval_sequences = 128;
    c.grid.layers = vec![1];
    c.grid.ks = vec![12];
    c.sae.steps = 600;
    c.simplex.aanet.steps = 150;
    c.simplex.aanet.restarts = 1;
    c.simplex.aanet.hidden = [64, 32];
    c.simplex.null_attempts = 1;
    c.validation.kl_pairs = 500;
    c.steering.scales = vec![5.0];
    c.steering.prompts_per_vertex = 2;
    c
}
