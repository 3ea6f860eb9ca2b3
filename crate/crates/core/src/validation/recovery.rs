// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{r2, select_rows, Ridge};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// `r2[cluster][component]`; `None` when the component has no held-out variance.
    pub r2: Vec<Vec<Option<f64>>>,
    /// Component each cluster predicts best.
    pub assignment: Vec<Option<usize>>,
    /// Best-predicting claimant per component.
    pub representative: Vec<Option<usize>>,
    /// Held-out R² of each component's representative.
    pub component_r2: Vec<Option<f64>>,
    /// `(component, clusters)` for components claimed by more than one cluster.
    pub conflicts: Vec<(usize, Vec<usize>)>,
    /// Mean of `component_r2` over represented components.
    pub mean_r2: Option<f64>,
    /// Components skipped for having no held-out variance.
    pub degenerate: Vec<usize>,
}

impl RecoveryResult {
    /// Every component with variance has a representative.
    pub fn all_recovered(&self) -> bool {
        self.representative.iter().enumerate().all(|(k, c)| c.is_some() || self.degenerate.contains(&k))
            && self.representative.iter().any(Option::is_some)
    }

    pub fn n_recovered(&self) -> usize {
        self.representative.iter().filter(|c| c.is_some()).count()
    }
}

/// Fits a ridge map from each cluster's signals to each component's belief
/// vectors on `fit_rows` and scores held-out R² on `test_rows`.
///
/// `signals[c]` is `[n, p_c]`; `beliefs[k]` is `[n, s_k]`.
pub fn recovery_r2(
    signals: &[DMatrix<f64>],
    beliefs: &[DMatrix<f64>],
    fit_rows: &[usize],
    test_rows: &[usize],
    ridge: f64,
) -> Result<RecoveryResult> {
    let fit: BTreeSet<usize> = fit_rows.iter().copied().collect();
    if test_rows.iter().any(|r| fit.contains(r)) {
        return Err(Error::invalid("held-out rows overlap the fit rows"));
    }
    if fit_rows.len() < 2 || test_rows.is_empty() {
        return Err(Error::InsufficientData(format!("{} fit rows, {} test rows", fit_rows.len(), test_rows.len())));
    }
    let n = beliefs.first().map_or(0, DMatrix::nrows);
    if signals.iter().chain(beliefs).any(|m| m.nrows() != n) {
        return Err(Error::invalid("signals and beliefs disagree on row count"));
    }
    if let Some(&r) = fit_rows.iter().chain(test_rows).find(|&&r| r >= n) {
        return Err(Error::invalid(format!("row {r} out of range for {n} rows")));
    }
    let targets: Vec<(DMatrix<f64>, DMatrix<f64>)> = beliefs.iter().map(|b| (select_rows(b, fit_rows), select_rows(b, test_rows))).collect();
    let mut table = Vec::with_capacity(signals.len());
    for s in signals {
        let xf = select_rows(s, fit_rows);
        let xt = select_rows(s, test_rows);
        let row: Vec<Option<f64>> = targets
            .iter()
            .map(|(yf, yt)| {
                if s.ncols() == 0 {
                    return r2(yt, &DMatrix::from_fn(yt.nrows(), yt.ncols(), |_, j| yf.column(j).mean()));
                }
                let model = Ridge::fit(&xf, yf, ridge);
                r2(yt, &model.predict(&xt))
            })
            .collect();
        table.push(row);
    }
    let n_comp = beliefs.len();
    let assignment: Vec<Option<usize>> = table
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter_map(|(k, v)| v.map(|v| (k, v)))
                .fold(None, |b: Option<(usize, f64)>, c| match b {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                })
                .map(|(k, _)| k)
        })
        .collect();
    let mut representative = vec![None; n_comp];
    let mut component_r2 = vec![None; n_comp];
    let mut conflicts = Vec::new();
    for k in 0..n_comp {
        let claimants: Vec<usize> = (0..signals.len()).filter(|&c| assignment[c] == Some(k)).collect();
        if claimants.len() > 1 {
            conflicts.push((k, claimants.clone()));
        }
        if let Some(&best) = claimants.iter().max_by(|&&a, &&b| {
            let (ra, rb) = (table[a][k].unwrap_or(f64::NEG_INFINITY), table[b][k].unwrap_or(f64::NEG_INFINITY));
            ra.total_cmp(&rb).then(b.cmp(&a))
        }) {
            representative[k] = Some(best);
            component_r2[k] = table[best][k];
        }
    }
    let vals: Vec<f64> = component_r2.iter().flatten().copied().collect();
    let mean_r2 = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let degenerate: Vec<usize> = (0..n_comp).filter(|&k| table.iter().all(|row| row[k].is_none())).collect();
    if !degenerate.is_empty() {
        log::warn!("components without held-out variance: {degenerate:?}");
    }
    Ok(RecoveryResult { r2: table, assignment, representative, component_r2, conflicts, mean_r2, degenerate })
}
