// SPDX-License-Identifier: MIT OR Apache-2.0

use belief_geometry::processes::{
    mess3_spec, mess3_standard_spec, toy_components, tom_quantum_spec, BeliefPoint, CompositeSpec, Mess3Convention, ProcessSpec,
};
use belief_geometry::rng;
use proptest::prelude::*;

fn op(spec: &ProcessSpec, y: usize, i: usize, j: usize) -> f64 {
    spec.ops[y][i * spec.n_states + j]
}

/// Posterior over the final state by summing the joint over every hidden path.
fn enumerate_posterior(spec: &ProcessSpec, b0: &[f64], ys: &[usize]) -> Vec<f64> {
    let n = spec.n_states;
    let mut paths: Vec<(usize, f64)> = (0..n).map(|i| (i, b0[i])).collect();
    for &y in ys {
        let mut next = Vec::new();
        for &(s, w) in &paths {
            for t in 0..n {
                next.push((t, w * op(spec, y, s, t)));
            }
        }
        paths = next;
    }
    let mut post = vec![0.0; n];
    for (s, w) in paths {
        post[s] += w;
    }
    let z: f64 = post.iter().sum();
    post.iter().map(|p| p / z).collect()
}

#[test]
fn two_step_updates_match_joint_enumeration() {
    for spec in [mess3_spec(0.05, 0.85).unwrap(), mess3_standard_spec(0.05, 0.85).unwrap()] {
        let b0 = BeliefPoint(vec![1.0, 0.0, 0.0]);
        for y1 in 0..3 {
            let b1 = spec.belief_update(&b0, y1).unwrap();
            let want1 = enumerate_posterior(&spec, &b0.0, &[y1]);
            for s in 0..3 {
                assert!((b1.0[s] - want1[s]).abs() < 1e-12);
            }
            for y2 in 0..3 {
                let b2 = spec.belief_update(&b1, y2).unwrap();
                let want = enumerate_posterior(&spec, &b0.0, &[y1, y2]);
                for s in 0..3 {
                    assert!((b2.0[s] - want[s]).abs() < 1e-12, "y=({y1},{y2}) state {s}: {} vs {}", b2.0[s], want[s]);
                }
            }
        }
    }
}

#[test]
fn observing_own_token_from_a_pure_state_by_hand() {
    // literal reading: the current state emits, then moves; the posterior is the transition row
    let (x, a) = (0.05, 0.85);
    let b = mess3_spec(x, a).unwrap().belief_update(&BeliefPoint(vec![1.0, 0.0, 0.0]), 0).unwrap();
    let want = [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0];
    for s in 0..3 {
        assert!((b.0[s] - want[s]).abs() < 1e-12);
    }
    // standard reading: move first, the destination emits
    let b = mess3_standard_spec(x, a).unwrap().belief_update(&BeliefPoint(vec![1.0, 0.0, 0.0]), 0).unwrap();
    let off = x * (1.0 - a) / 2.0;
    let w = [(1.0 - 2.0 * x) * a, off, off];
    let z: f64 = w.iter().sum();
    for s in 0..3 {
        assert!((b.0[s] - w[s] / z).abs() < 1e-12);
    }
}

#[test]
fn bloch_walk_emissions_sum_to_one_along_a_long_path() {
    for (a, b) in [(1.51, 3.07), (1.99, 2.51)] {
        let spec = tom_quantum_spec(a, b).unwrap();
        let comp = CompositeSpec::compose(vec![spec.clone()]).unwrap();
        let path = comp.sample_path(10_000, 5);
        for step in &path.beliefs {
            let p = spec.symbol_probs(&step[0]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= -1e-12));
        }
    }
}

/// Mean and standard error of per-path frequencies.
struct Batch {
    sum: f64,
    sum_sq: f64,
}

impl Batch {
    fn push(&mut self, f: f64) {
        self.sum += f;
        self.sum_sq += f * f;
    }

    fn z(&self, n: f64, p: f64) -> f64 {
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean) * n / (n - 1.0);
        (mean - p) / (var / n).sqrt()
    }
}

#[test]
fn composite_unigram_matches_stationary_law() {
    let spec = CompositeSpec::compose(toy_components(Mess3Convention::Standard).unwrap()).unwrap();
    let law = spec.stationary_unigram();
    assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let (n_paths, len) = (62_500, 16);
    let v = spec.vocab_size();
    let decoded: Vec<Vec<usize>> = (0..v).map(|t| spec.decode(t)).collect();
    let mut r = rng::seeded(17);
    // per-path frequencies keep the standard errors honest under within-path correlation
    let mut tokens: Vec<Batch> = (0..v).map(|_| Batch { sum: 0.0, sum_sq: 0.0 }).collect();
    let mut symbols: Vec<Vec<Batch>> =
        spec.components.iter().map(|c| (0..c.n_symbols).map(|_| Batch { sum: 0.0, sum_sq: 0.0 }).collect()).collect();
    let mut counts = vec![0u32; v];
    for _ in 0..n_paths {
        counts.fill(0);
        for &t in &spec.sample_path_with(len, &mut r).tokens {
            counts[t] += 1;
        }
        for (t, b) in tokens.iter_mut().enumerate() {
            b.push(counts[t] as f64 / len as f64);
        }
        for (c, per) in symbols.iter_mut().enumerate() {
            for (y, b) in per.iter_mut().enumerate() {
                let k: u32 = (0..v).filter(|&t| decoded[t][c] == y).map(|t| counts[t]).sum();
                b.push(k as f64 / len as f64);
            }
        }
    }
    let n = n_paths as f64;
    assert_eq!(n as usize * len, 1_000_000);
    for (c, comp) in spec.components.iter().enumerate() {
        let st = comp.symbol_probs(&comp.stationary_belief());
        for (y, b) in symbols[c].iter().enumerate() {
            let z = b.z(n, st[y]);
            assert!(z.abs() < 3.0, "component {c} symbol {y}: z = {z}");
        }
    }
    // 432 cells: the squared z-scores should average to about one
    let mean_sq = tokens.iter().enumerate().map(|(t, b)| b.z(n, law[t]).powi(2)).sum::<f64>() / v as f64;
    assert!((0.8..1.2).contains(&mean_sq), "mean squared z-score {mean_sq}");
}

#[test]
fn same_seed_bit_identical_paths() {
    let spec = CompositeSpec::compose(toy_components(Mess3Convention::Standard).unwrap()).unwrap();
    let a = spec.sample_path(16, 42);
    let b = spec.sample_path(16, 42);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.beliefs, b.beliefs);
    assert_eq!(a.tokens.len(), 16);
}

proptest! {
    #[test]
    fn updates_stay_normalized(x in 0.01f64..0.49, a in 0.01f64..0.99, ys in prop::collection::vec(0usize..3, 1..60)) {
        for spec in [mess3_spec(x, a).unwrap(), mess3_standard_spec(x, a).unwrap()] {
            for b in spec.filter(&ys).unwrap() {
                prop_assert!((b.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(b.0.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn bloch_walk_beliefs_stay_normalized(seed in 0u64..1000) {
        let spec = CompositeSpec::compose(toy_components(Mess3Convention::Standard).unwrap()).unwrap();
        let path = spec.sample_path(16, seed);
        for step in &path.beliefs {
            for b in step {
                prop_assert!((b.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
