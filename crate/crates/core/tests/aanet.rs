// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;

use belief_geometry::aanet::{detect_elbow, fit_aanet, sweep_k, AanetConfig, SimplexFit};
use belief_nn::Tensor;

fn cfg() -> AanetConfig {
    AanetConfig { steps: 3000, batch: 64, restarts: 3, ..AanetConfig::default() }
}

fn assert_chosen_is_minimal(fit: &SimplexFit) {
    let chosen = fit.restart_losses[fit.chosen_restart].unwrap();
    for l in fit.restart_losses.iter().flatten() {
        assert!(chosen <= *l);
    }
}

#[test]
fn recovers_clean_simplex_vertices() {
    let s = simplex_data(3, 16, 3000, 5, false);
    let fit = fit_aanet(&s.x, 3, &cfg(), 1).unwrap();
    assert_chosen_is_minimal(&fit);
    let best = permutations(3)
        .into_iter()
        .map(|p| (0..3).map(|i| dist(&fit.archetypes[p[i]], &s.verts[i])).fold(0f32, f32::max))
        .fold(f32::INFINITY, f32::min);
    assert!(best < 0.1, "aligned vertex error {best}");
    let arch = Tensor::new(&[3, 16], fit.archetypes.concat());
    let b = fit.barycentric(&arch);
    for j in 0..3 {
        assert!(b.row(j)[j] >= 0.9, "archetype {j} code {:?}", b.row(j));
    }
}

#[test]
fn warped_simplex_coordinates_track_ground_truth() {
    let s = simplex_data(3, 16, 3000, 6, true);
    let fit = fit_aanet(&s.x, 3, &cfg(), 2).unwrap();
    let b = fit.barycentric(&s.x);
    let n = s.weights.len();
    let cols: Vec<Vec<f64>> = (0..3).map(|j| (0..n).map(|i| b.row(i)[j] as f64).collect()).collect();
    let truth: Vec<Vec<f64>> = (0..3).map(|j| s.weights.iter().map(|w| w[j]).collect()).collect();
    let best = permutations(3)
        .into_iter()
        .map(|p| (0..3).map(|i| pearson(&cols[p[i]], &truth[i])).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best >= 0.8, "min per-coordinate correlation {best}");
}

#[test]
fn repeated_point_collapses_archetypes() {
    let p: Vec<f32> = (0..8).map(|j| j as f32 * 0.25 - 1.0).collect();
    let x = Tensor::new(&[200, 8], p.repeat(200));
    let fit = fit_aanet(&x, 3, &AanetConfig { steps: 1500, batch: 64, restarts: 2, ..AanetConfig::default() }, 3).unwrap();
    for a in &fit.archetypes {
        assert!(dist(a, &p) < 1e-3, "archetype {a:?}");
    }
    assert!(fit.mean_loss < 1e-6, "loss {}", fit.mean_loss);
}

#[test]
fn vertex_delta_is_antisymmetric() {
    let s = simplex_data(3, 8, 400, 7, false);
    let fit = fit_aanet(&s.x, 3, &AanetConfig { steps: 200, batch: 64, restarts: 1, ..AanetConfig::default() }, 4).unwrap();
    let ab = fit.vertex_delta(0, 2).unwrap();
    let ba = fit.vertex_delta(2, 0).unwrap();
    assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
    assert!(fit.vertex_delta(1, 1).is_err());
    assert!(fit.vertex_delta(0, 3).is_err());
}

#[test]
fn sweep_finds_the_true_vertex_count() {
    let s = simplex_data(3, 12, 2000, 8, false);
    let c = AanetConfig { steps: 2000, batch: 64, restarts: 2, ks: vec![2, 3, 4, 5], ..AanetConfig::default() };
    let (curve, fits) = sweep_k(&s.x, &c, 9).unwrap();
    assert_eq!(curve.chosen, Some(3), "curve {:?}", curve.losses);
    assert_eq!(fits.len(), 4);
}

#[test]
fn convex_knee_at_four() {
    let ks = [2, 3, 4, 5, 6, 7];
    let losses = [1.0, 0.7, 0.45, 0.1, 0.08, 0.07];
    // second differences: K=3 0.05, K=4 0.1, K=5 0.33 -> knee where the drop stops
    assert_eq!(detect_elbow(&ks, &losses, 0.15).0, Some(5));
    let knee4 = [1.0, 0.6, 0.25, 0.22, 0.2, 0.19];
    assert_eq!(detect_elbow(&ks, &knee4, 0.15).0, Some(4));
}

#[test]
fn checkpoint_roundtrip() {
    let s = simplex_data(3, 8, 400, 10, false);
    let fit = fit_aanet(&s.x, 3, &AanetConfig { steps: 100, batch: 64, restarts: 2, ..AanetConfig::default() }, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.bin");
    fit.save(&path, serde_json::json!({"cluster": 2})).unwrap();
    let (back, meta) = SimplexFit::load(&path).unwrap();
    assert_eq!(meta["cluster"], 2);
    assert_eq!(back.barycentric(&s.x).data(), fit.barycentric(&s.x).data());
    assert_eq!(back.archetypes, fit.archetypes);
    assert_eq!(back.restart_losses, fit.restart_losses);
}
