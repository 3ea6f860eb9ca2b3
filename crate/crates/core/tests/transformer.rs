// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use belief_geometry::linalg::{self, Ridge};
use belief_geometry::processes::{mess3_standard_spec, toy_components, BeliefPoint, CompositeSpec, Mess3Convention};
use belief_geometry::rng;
use belief_geometry::transformer::{
    accuracy_on, capture_residual, heldout_accuracy, train_lm_with, train_step, Lm, LmConfig, Patch, TrainMetrics,
};
use belief_nn::{AdamW, Graph};
use nalgebra::DMatrix;

fn mess3_only() -> CompositeSpec {
    CompositeSpec::compose(vec![mess3_standard_spec(0.05, 0.85).unwrap()]).unwrap()
}

fn small_cfg(vocab: usize, steps: usize) -> LmConfig {
    LmConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        context_length: 16,
        vocab,
        steps,
        batch: 32,
        lr: 3e-3,
        warmup: 50,
        eval_sequences: 256,
        ..LmConfig::default()
    }
}

/// One small model on the Mess3 process, shared by the capture and steering tests.
fn trained() -> &'static (Lm, TrainMetrics) {
    static LM: OnceLock<(Lm, TrainMetrics)> = OnceLock::new();
    LM.get_or_init(|| train_lm_with(&mess3_only(), &small_cfg(3, 1500), 21, |_, _| {}).unwrap())
}

fn sequences(spec: &CompositeSpec, n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| spec.sample_path_with(len, &mut r).tokens).collect()
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn untrained_model_guesses_at_chance() {
    let spec = CompositeSpec::compose(toy_components(Mess3Convention::Standard).unwrap()).unwrap();
    for seed in 0..3 {
        let lm = Lm::new(LmConfig::default(), seed).unwrap();
        let acc = heldout_accuracy(&lm, &spec, 256, 100 + seed);
        assert!((0.001..=0.005).contains(&acc), "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn repeated_sequence_is_memorized() {
    let seq: Vec<usize> = (0..17).map(|i| (i * 5 + 3) % 11).collect();
    let mut lm = Lm::new(small_cfg(11, 0), 4).unwrap();
    let opt = AdamW::new(3e-3);
    let batch = 8;
    let inp: Vec<usize> = (0..batch).flat_map(|_| seq[..16].to_vec()).collect();
    let tgt: Vec<usize> = (0..batch).flat_map(|_| seq[1..].to_vec()).collect();
    for _ in 0..300 {
        train_step(&mut lm, &opt, &inp, &tgt, batch, 3e-3).unwrap();
    }
    assert_eq!(accuracy_on(&lm, &[seq]), 1.0);
}

#[test]
fn vocab_must_match_the_process() {
    let spec = mess3_only();
    assert!(train_lm_with(&spec, &small_cfg(4, 1), 0, |_, _| {}).is_err());
}

#[test]
fn training_beats_chance_and_smoothed_loss_falls() {
    let (_, m) = trained();
    // optimal top-1 on this process is about 0.79
    assert!(m.final_accuracy > 0.6, "accuracy {}", m.final_accuracy);
    assert!(m.final_accuracy > m.initial_accuracy);
    let means: Vec<f32> = m.losses.chunks(500).map(|w| w.iter().sum::<f32>() / w.len() as f32).collect();
    for p in means.windows(2) {
        assert!(p[1] < p[0], "windowed losses {means:?}");
    }
}

#[test]
fn capture_shape_and_determinism() {
    let (lm, _) = trained();
    let spec = mess3_only();
    let seqs = sequences(&spec, 10, 16, 5);
    let a = capture_residual(lm, &spec, &seqs, 1).unwrap();
    let b = capture_residual(lm, &spec, &seqs, 1).unwrap();
    assert_eq!(a.vectors.shape(), &[160, 32]);
    assert_eq!(a.positions.len(), 160);
    assert_eq!(a.beliefs.len(), 160);
    assert_eq!(a.vectors.data(), b.vectors.data());
    assert_eq!(a.positions[17], (1, 1));
    assert!(capture_residual(lm, &spec, &seqs, 2).is_err());

    let full = CompositeSpec::compose(toy_components(Mess3Convention::Standard).unwrap()).unwrap();
    let big = Lm::new(LmConfig::default(), 1).unwrap();
    let cap = capture_residual(&big, &full, &sequences(&full, 3, 16, 6), 0).unwrap();
    assert_eq!(cap.vectors.shape(), &[48, 128]);
}

#[test]
fn captured_residuals_linearly_predict_beliefs() {
    let (lm, _) = trained();
    let spec = mess3_only();
    let cap = capture_residual(lm, &spec, &sequences(&spec, 400, 16, 7), 1).unwrap();
    let x = linalg::to_matrix(&cap.vectors);
    let y = DMatrix::from_fn(x.nrows(), 3, |i, j| cap.beliefs[i][0].0[j]);
    let train: Vec<usize> = (0..x.nrows()).filter(|&i| cap.positions[i].0 < 300).collect();
    let test: Vec<usize> = (0..x.nrows()).filter(|&i| cap.positions[i].0 >= 300).collect();
    let probe = Ridge::fit(&linalg::select_rows(&x, &train), &linalg::select_rows(&y, &train), 1e-3);
    let yt = linalg::select_rows(&y, &test);
    let r2 = linalg::r2(&yt, &probe.predict(&linalg::select_rows(&x, &test))).unwrap();
    assert!(r2 > 0.0, "held-out R^2 {r2}");
}

#[test]
fn steering_toward_a_vertex_moves_predictions_toward_its_emissions() {
    let (lm, _) = trained();
    let spec = mess3_only();
    let layer = 0;
    let cap = capture_residual(lm, &spec, &sequences(&spec, 400, 16, 8), layer).unwrap();
    let d = lm.cfg.d_model;
    let n = cap.positions.len();
    let mean_of = |rows: &[usize]| -> Vec<f32> {
        (0..d).map(|j| rows.iter().map(|&i| cap.vectors.row(i)[j]).sum::<f32>() / rows.len() as f32).collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let center = mean_of(&all);
    let proc = &spec.components[0];
    let prompts = sequences(&spec, 60, 8, 9);
    for v in 0..3 {
        let near: Vec<usize> = (0..n).filter(|&i| cap.beliefs[i][0].0[v] > 0.8).collect();
        assert!(near.len() > 20, "vertex {v}: {} near rows", near.len());
        let delta: Vec<f32> = mean_of(&near).iter().zip(&center).map(|(a, b)| 5.0 * (a - b)).collect();
        let mut pure = vec![0.0; 3];
        pure[v] = 1.0;
        let law = proc.symbol_probs(&BeliefPoint(pure));
        let (mut before, mut after) = (0.0, 0.0);
        for p in &prompts {
            let len = p.len();
            let run = |patch: Option<&Patch>| {
                let mut g = Graph::new();
                let f = lm.forward(&mut g, p, 1, len, patch);
                softmax(&g.value(f.logits).data()[(len - 1) * 3..len * 3])
            };
            before += kl(&law, &run(None));
            after += kl(&law, &run(Some(&Patch { layer, delta: &delta, rows: vec![len - 1] })));
        }
        assert!(after < before, "vertex {v}: KL {after} steered vs {before} unsteered");
    }
}
