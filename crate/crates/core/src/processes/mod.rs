// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generative processes with exact belief tracking.
//!
//! A [`ProcessSpec`] is a (generalized) hidden Markov model given by one
//! transition operator per symbol. Beliefs are row vectors updated by
//! `b' = b T_y / (b T_y 1)`.

mod composite;
mod mess3;
mod tom_quantum;

pub use composite::{toy_components, CompositeSpec, SampledPath};
pub use mess3::{mess3, mess3_spec, mess3_standard_spec, Mess3Convention};
pub use tom_quantum::{bloch_coords, tom_quantum_spec};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on row-stochasticity of `sum_y T_y` for HMMs.
pub const STOCHASTIC_TOL: f64 = 1e-12;
const CLIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessKind {
    /// Non-negative operators; beliefs are probability vectors.
    Hmm,
    /// Signed operators; beliefs are normalized but may leave the simplex.
    Ghmm,
}

/// One generative process: `ops[y][i * n + j]` is the weight of moving from
/// state `i` to `j` while emitting `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub name: String,
    pub kind: ProcessKind,
    pub n_states: usize,
    pub n_symbols: usize,
    pub ops: Vec<Vec<f64>>,
    pub initial_belief: Vec<f64>,
}

/// Normalized filter state over a process's hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPoint(pub Vec<f64>);

impl BeliefPoint {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn max_coord(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl ProcessSpec {
    pub fn new(
        name: impl Into<String>,
        kind: ProcessKind,
        n_states: usize,
        ops: Vec<Vec<f64>>,
        initial_belief: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self { name: name.into(), kind, n_states, n_symbols: ops.len(), ops, initial_belief };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks shapes, row sums of `sum_y T_y`, sign constraints, and the
    /// normalization of the initial belief.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        if n == 0 || self.n_symbols == 0 {
            return Err(Error::SpecConstruction("need at least one state and one symbol".into()));
        }
        if self.ops.iter().any(|t| t.len() != n * n) || self.initial_belief.len() != n {
            return Err(Error::SpecConstruction("operator or belief shape mismatch".into()));
        }
        if self.ops.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::SpecConstruction("non-finite operator entry".into()));
        }
        let total = self.total_operator();
        for i in 0..n {
            let s: f64 = total[i * n..(i + 1) * n].iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL * 10.0 {
                return Err(Error::SpecConstruction(format!("row {i} of sum_y T_y sums to {s}")));
            }
        }
        if self.kind == ProcessKind::Hmm && self.ops.iter().flatten().any(|&v| v < 0.0) {
            return Err(Error::SpecConstruction("HMM operators must be non-negative".into()));
        }
        let bs: f64 = self.initial_belief.iter().sum();
        if (bs - 1.0).abs() > 1e-9 {
            return Err(Error::SpecConstruction(format!("initial belief sums to {bs}")));
        }
        Ok(())
    }

    /// `sum_y T_y`, row-major.
    pub fn total_operator(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut t = vec![0.0; n * n];
        for op in &self.ops {
            t.iter_mut().zip(op).for_each(|(a, b)| *a += b);
        }
        t
    }

    pub fn initial(&self) -> BeliefPoint {
        BeliefPoint(self.initial_belief.clone())
    }

    /// `b T_y` as a row vector (unnormalized).
    fn propagate(&self, b: &[f64], y: usize) -> Vec<f64> {
        let n = self.n_states;
        let op = &self.ops[y];
        let mut out = vec![0.0; n];
        for (i, &bi) in b.iter().enumerate() {
            if bi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[j] += bi * op[i * n + j];
            }
        }
        out
    }

    /// Predictive distribution over the next symbol, `P(y) = b T_y 1`.
    pub fn symbol_probs(&self, b: &BeliefPoint) -> Vec<f64> {
        (0..self.n_symbols).map(|y| self.propagate(&b.0, y).iter().sum()).collect()
    }

    /// Bayes filter update after observing `y`.
    pub fn belief_update(&self, b: &BeliefPoint, y: usize) -> Result<BeliefPoint> {
        self.update_at(b, y, 0)
    }

    pub(crate) fn update_at(&self, b: &BeliefPoint, y: usize, step: usize) -> Result<BeliefPoint> {
        if y >= self.n_symbols {
            return Err(Error::invalid(format!("symbol {y} out of range for {} symbols", self.n_symbols)));
        }
        let mut next = self.propagate(&b.0, y);
        let z: f64 = next.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::ImpossibleSymbol { symbol: y, step });
        }
        next.iter_mut().for_each(|v| *v /= z);
        if self.kind == ProcessKind::Hmm {
            if next.iter().any(|&v| v < 0.0 && v >= -CLIP_TOL) {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
                let s: f64 = next.iter().sum();
                next.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(BeliefPoint(next))
    }

    /// Filters a whole symbol sequence from the initial belief; `out[t]` is
    /// the belief after observing `symbols[..=t]`.
    pub fn filter(&self, symbols: &[usize]) -> Result<Vec<BeliefPoint>> {
        let mut b = self.initial();
        let mut out = Vec::with_capacity(symbols.len());
        for (t, &y) in symbols.iter().enumerate() {
            b = self.update_at(&b, y, t)?;
            out.push(b.clone());
        }
        Ok(out)
    }

    /// Stationary belief by power iteration on `sum_y T_y`, from the initial belief.
    pub fn stationary_belief(&self) -> BeliefPoint {
        let n = self.n_states;
        let total = self.total_operator();
        let mut b = self.initial_belief.clone();
        for _ in 0..10_000 {
            let mut nb = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    nb[j] += b[i] * total[i * n + j];
                }
            }
            let diff: f64 = nb.iter().zip(&b).map(|(a, c)| (a - c).abs()).sum();
            b = nb;
            if diff < 1e-15 {
                break;
            }
        }
        BeliefPoint(b)
    }
}
