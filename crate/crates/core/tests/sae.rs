// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use belief_geometry::rng;
use belief_geometry::sae::{train_sae, SaeConfig, SaeModel, K_GRID};
use belief_geometry::Error;
use belief_nn::Tensor;
use common::gauss;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Rows `z B^T + c` with `z` standard normal in `dim` coordinates.
fn subspace_rows(n: usize, dim: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::seeded(seed);
    let basis = DMatrix::from_fn(d, dim, |_, _| gauss(&mut r)).qr().q();
    let offset: Vec<f64> = (0..d).map(|_| gauss(&mut r)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
        for i in 0..d {
            data.push((offset[i] + (0..dim).map(|j| basis[(i, j)] * z[j]).sum::<f64>()) as f32);
        }
    }
    Tensor::new(&[n, d], data)
}

fn cfg(d_sae: usize, k: usize, steps: usize) -> SaeConfig {
    SaeConfig { d_sae, k, steps, batch: 128, lr: 2e-3, dead_after: 500, heldout_frac: 0.1 }
}

fn rel_error(sae: &SaeModel, raw: &Tensor<f32>) -> f64 {
    let x = sae.normalize(raw);
    let xh = sae.decode(&sae.encode(&x));
    let (n, d) = x.dims2();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j] as f64).sum::<f64>() / n as f64).collect();
    let (mut sse, mut sst) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..d {
            sse += ((x.row(i)[j] - xh.row(i)[j]) as f64).powi(2);
            sst += (x.row(i)[j] as f64 - mean[j]).powi(2);
        }
    }
    sse / sst
}

fn support(row: &[f32]) -> Vec<usize> {
    (0..row.len()).filter(|&j| row[j] != 0.0).collect()
}

#[test]
fn sweep_grid_is_the_toy_grid() {
    assert_eq!(K_GRID, [3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 19, 22, 25]);
}

#[test]
fn ten_dimensional_subspace_is_reconstructed_with_k_ten() {
    let x = subspace_rows(4000, 10, 32, 1);
    let (sae, m) = train_sae(&x, &cfg(64, 10, 4000), 2).unwrap();
    assert!(m.heldout_rel_error < 0.05, "relative error {}", m.heldout_rel_error);
    let fresh = subspace_rows(4000, 10, 32, 1).select_rows(&(3000..4000).collect::<Vec<_>>());
    assert!(rel_error(&sae, &fresh) < 0.05);
}

#[test]
fn full_width_k_beats_every_smaller_k() {
    let x = subspace_rows(3000, 12, 24, 3);
    let err = |k: usize| train_sae(&x, &cfg(16, k, 3000), 4).unwrap().1.heldout_rel_error;
    let full = err(16);
    for k in [2, 4, 8] {
        let e = err(k);
        assert!(full < e, "k=16 error {full} vs k={k} error {e}");
    }
}

#[test]
fn unseen_rows_reconstruct_within_validation_margin() {
    let all = subspace_rows(6000, 8, 24, 5);
    let train = all.select_rows(&(0..4000).collect::<Vec<_>>());
    let unseen = all.select_rows(&(4000..6000).collect::<Vec<_>>());
    let (sae, m) = train_sae(&train, &cfg(48, 6, 3000), 6).unwrap();
    let e = rel_error(&sae, &unseen);
    assert!(e <= m.heldout_rel_error * 1.1, "unseen {e} vs validation {}", m.heldout_rel_error);
}

#[test]
fn topk_support_is_stable_under_a_reconstruct_cycle() {
    let x = subspace_rows(3000, 10, 32, 7);
    let (sae, _) = train_sae(&x, &cfg(64, 10, 4000), 8).unwrap();
    let xn = sae.normalize(&x);
    let f = sae.encode(&xn);
    let f2 = sae.encode(&sae.decode(&f));
    let n = f.dims2().0;
    let same = (0..n).filter(|&i| support(f.row(i)) == support(f2.row(i))).count();
    assert!(same as f64 >= 0.99 * n as f64, "{same}/{n} rows keep their support");
}

#[test]
fn training_is_seed_deterministic() {
    let x = subspace_rows(600, 4, 12, 9);
    let c = cfg(16, 3, 200);
    let (a, ma) = train_sae(&x, &c, 10).unwrap();
    let (b, mb) = train_sae(&x, &c, 10).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(a.w_dec().data(), b.w_dec().data());
    assert_eq!(a.w_enc().data(), b.w_enc().data());
}

#[test]
fn nan_input_is_a_training_error() {
    let mut x = subspace_rows(600, 4, 12, 11);
    x.data_mut()[5] = f32::NAN;
    let err = train_sae(&x, &cfg(16, 3, 50), 1).unwrap_err();
    assert!(matches!(err, Error::Training { .. } | Error::InvalidArgument(_)), "{err}");
}

#[test]
fn too_few_rows_for_a_batch_is_insufficient_data() {
    let x = subspace_rows(100, 4, 12, 12);
    assert!(matches!(train_sae(&x, &cfg(16, 3, 10), 1), Err(Error::InsufficientData(_))));
}

#[test]
fn contributions_of_all_and_no_latents() {
    let x = subspace_rows(600, 6, 16, 13);
    let (sae, _) = train_sae(&x, &cfg(32, 4, 300), 14).unwrap();
    let f = sae.encode(&sae.normalize(&x));
    let all: Vec<usize> = (0..32).collect();
    let full = sae.cluster_contribution(&f, &all);
    let dec = sae.decode(&f);
    for i in 0..f.dims2().0 {
        for j in 0..16 {
            assert!((full.row(i)[j] - (dec.row(i)[j] - sae.b_dec()[j])).abs() < 1e-5);
        }
    }
    assert!(sae.cluster_contribution(&f, &[]).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encode_keeps_at_most_k_nonnegative_latents(seed in 0u64..10_000, k in 1usize..20) {
        let sae = SaeModel::new(16, 24, k, seed).unwrap();
        let mut r = rng::seeded(seed ^ 0xabc);
        let x = Tensor::new(&[64, 16], (0..64 * 16).map(|_| gauss(&mut r) as f32).collect());
        let f = sae.encode(&x);
        for i in 0..64 {
            prop_assert!(support(f.row(i)).len() <= k);
            prop_assert!(f.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}
