// SPDX-License-Identifier: MIT OR Apache-2.0

use belief_nn::gradcheck::{run_op_suite, OPS};
use belief_nn::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    let report = run_op_suite(100, 7, 1e-5).expect("suite ran");
    assert_eq!(report.len(), OPS.len());
    for r in &report {
        assert!(r.cases >= 100);
        assert!(r.max_rel_error < 1e-4, "{}: max relative error {:.3e}", r.op, r.max_rel_error);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(&[3, 6], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>()));
        let a = g.causal_attention(x, 1, 3, 2);
        let s = g.softmax(a);
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[rows, cols], v[..rows * cols].to_vec()));
        let y = g.softmax(x);
        for r in g.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
