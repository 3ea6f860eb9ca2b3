// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear-algebra helpers over `nalgebra` matrices.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use belief_nn::Tensor;

/// `[n, d]` f32 tensor to an f64 matrix.
pub fn to_matrix(t: &Tensor<f32>) -> DMatrix<f64> {
    let (n, d) = t.dims2();
    DMatrix::from_row_iterator(n, d, t.data().iter().map(|&v| v as f64))
}

/// Row subset of `m`.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Ridge regression with an unpenalized intercept.
#[derive(Debug, Clone)]
pub struct Ridge {
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    /// `[p, q]`.
    pub coef: DMatrix<f64>,
}

impl Ridge {
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Self {
        assert_eq!(x.nrows(), y.nrows(), "x and y row counts differ");
        let x_mean = column_mean(x);
        let y_mean = column_mean(y);
        let xc = center(x, &x_mean);
        let yc = center(y, &y_mean);
        let mut gram = xc.transpose() * &xc;
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.transpose() * &yc;
        let coef = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram.svd(true, true).solve(&rhs, 1e-12).unwrap_or_else(|_| DMatrix::zeros(x.ncols(), y.ncols())),
        };
        Self { x_mean, y_mean, coef }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = center(x, &self.x_mean) * &self.coef;
        for mut row in out.row_iter_mut() {
            row += self.y_mean.transpose();
        }
        out
    }
}

pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Pooled `1 - SS_res / SS_tot` over all columns; `None` when `SS_tot = 0`.
pub fn r2(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Option<f64> {
    let mean = column_mean(y_true);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for j in 0..y_true.ncols() {
        for i in 0..y_true.nrows() {
            ss_res += (y_true[(i, j)] - y_pred[(i, j)]).powi(2);
            ss_tot += (y_true[(i, j)] - mean[j]).powi(2);
        }
    }
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// Fold id per row, balanced and shuffled. Rows sharing a `strata` label
/// are spread evenly across folds.
pub fn kfold_assign<R: Rng + ?Sized>(n: usize, k: usize, strata: Option<&[usize]>, rng: &mut R) -> Vec<usize> {
    let mut fold = vec![0; n];
    let labels: Vec<usize> = strata.map_or_else(|| vec![0; n], <[usize]>::to_vec);
    let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut offset = 0;
    for l in 0..n_labels {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == l).collect();
        idx.shuffle(rng);
        for (j, &i) in idx.iter().enumerate() {
            fold[i] = (j + offset) % k;
        }
        offset += idx.len();
    }
    fold
}

/// Out-of-fold ridge predictions for `y` from `x`, then pooled R².
pub fn cv_r2(x: &DMatrix<f64>, y: &DMatrix<f64>, folds: &[usize], k: usize, lambda: f64) -> Option<f64> {
    let mut pred = DMatrix::zeros(y.nrows(), y.ncols());
    for f in 0..k {
        let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let model = Ridge::fit(&select_rows(x, &train), &select_rows(y, &train), lambda);
        let p = model.predict(&select_rows(x, &test));
        for (r, &i) in test.iter().enumerate() {
            pred.set_row(i, &p.row(r));
        }
    }
    r2(y, &pred)
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Orthonormal basis `[d, r']` of the top `r` left singular directions of the
/// `[d, m]` matrix `m`, dropping directions with singular value below `tol`.
pub fn top_left_singular(m: &DMatrix<f64>, r: usize, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let keep: Vec<usize> = order.into_iter().filter(|&i| svd.singular_values[i] > tol).take(r).collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |i, j| u[(i, keep[j])])
}

/// Projects centered rows of `x` onto its top `n_comp` principal axes.
pub fn pca_project(x: &DMatrix<f64>, n_comp: usize) -> DMatrix<f64> {
    let mean = column_mean(x);
    let xc = center(x, &mean);
    let axes = top_left_singular(&xc.transpose(), n_comp, 0.0);
    xc * axes
}

/// Column mean and the top `n_comp` principal axes `[d, r]` of `x` from the
/// covariance eigendecomposition. Axes with eigenvalue at most `rel_tol`
/// times the largest are dropped; each axis is signed so that its
/// largest-magnitude entry is positive.
pub fn principal_axes(x: &DMatrix<f64>, n_comp: usize, rel_tol: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mean = column_mean(x);
    let d = x.ncols();
    if x.nrows() < 2 {
        return (mean, DMatrix::zeros(d, 0));
    }
    let xc = center(x, &mean);
    let cov = (xc.transpose() * &xc) / (x.nrows() - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > rel_tol * top && top > 0.0).take(n_comp).collect();
    let mut axes = DMatrix::from_fn(d, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
    for mut col in axes.column_iter_mut() {
        let arg = col.iamax();
        if col[arg] < 0.0 {
            col.neg_mut();
        }
    }
    (mean, axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ridge_recovers_linear_map() {
        let mut r = rng::seeded(1);
        let x = DMatrix::from_fn(200, 3, |_, _| r.random::<f64>());
        let y = DMatrix::from_fn(200, 2, |i, j| 2.0 * x[(i, 0)] - x[(i, 2)] + j as f64 + 0.5);
        let m = Ridge::fit(&x, &y, 1e-9);
        assert!((r2(&y, &m.predict(&x)).unwrap() - 1.0).abs() < 1e-9);
        assert!((m.coef[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn r2_of_constant_target_is_undefined() {
        let y = DMatrix::from_element(5, 1, 3.0);
        assert_eq!(r2(&y, &y), None);
    }

    #[test]
    fn noise_regressors_have_nonpositive_cv_r2() {
        let mut r = rng::seeded(2);
        let x = DMatrix::from_fn(300, 4, |_, _| r.random::<f64>());
        let y = DMatrix::from_fn(300, 1, |_, _| r.random::<f64>());
        let folds = kfold_assign(300, 5, None, &mut r);
        assert!(cv_r2(&x, &y, &folds, 5, 1e-6).unwrap() < 0.02);
    }

    #[test]
    fn stratified_folds_balance_labels() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let folds = kfold_assign(50, 5, Some(&labels), &mut rng::seeded(3));
        for f in 0..5 {
            let members: Vec<usize> = (0..50).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 10);
            assert_eq!(members.iter().filter(|&&i| labels[i] == 0).count(), 5);
        }
    }

    #[test]
    fn principal_axes_drop_null_directions() {
        let mut r = rng::seeded(5);
        let z = DMatrix::from_fn(500, 2, |_, _| r.random::<f64>() - 0.5);
        let mix = DMatrix::from_fn(2, 6, |i, j| ((i * 6 + j) as f64).sin());
        let x = z * mix;
        let (_, axes) = principal_axes(&x, 16, 1e-9);
        assert_eq!(axes.ncols(), 2);
        for c in axes.column_iter() {
            assert!(c[c.iamax()] > 0.0);
        }
        let (_, again) = principal_axes(&x, 16, 1e-9);
        assert_eq!(axes, again);
    }

    #[test]
    fn left_singular_basis_is_orthonormal() {
        let mut r = rng::seeded(4);
        let m = DMatrix::from_fn(8, 20, |_, _| r.random::<f64>() - 0.5);
        let b = top_left_singular(&m, 3, 1e-12);
        let g = b.transpose() * &b;
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-10);
    }
}
