// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mess3: three hidden states, three symbols.

use serde::{Deserialize, Serialize};

use super::{ProcessKind, ProcessSpec};
use crate::{Error, Result};

/// How the two Mess3 parameters are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mess3Convention {
    /// `a` is the self-transition probability; state `s` emits `s` with
    /// probability `x` and a uniform token (over all 3) otherwise. Emission
    /// depends on the current state.
    Literal,
    /// `x` is the per-neighbour transition probability (self-transition
    /// `1 - 2x`); the destination state `s` emits `s` with probability `a`
    /// and each other token with `(1 - a) / 2`.
    #[default]
    Standard,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::invalid(format!("mess3 parameter {name}={v} must lie in (0, 1)")));
    }
    Ok(())
}

pub fn mess3(x: f64, a: f64, convention: Mess3Convention) -> Result<ProcessSpec> {
    match convention {
        Mess3Convention::Literal => mess3_spec(x, a),
        Mess3Convention::Standard => mess3_standard_spec(x, a),
    }
}

/// Literal reading: `T_y[i][j] = E[i][y] P[i][j]` with `P` having `a` on the
/// diagonal and `(1-a)/2` elsewhere, and `E[s][y] = x [y = s] + (1-x)/3`.
pub fn mess3_spec(x: f64, a: f64) -> Result<ProcessSpec> {
    check_unit("x", x)?;
    check_unit("a", a)?;
    let p = |i: usize, j: usize| if i == j { a } else { (1.0 - a) / 2.0 };
    let e = |s: usize, y: usize| if s == y { x + (1.0 - x) / 3.0 } else { (1.0 - x) / 3.0 };
    let ops = (0..3)
        .map(|y| (0..9).map(|k| e(k / 3, y) * p(k / 3, k % 3)).collect())
        .collect();
    ProcessSpec::new(format!("mess3({x},{a})"), ProcessKind::Hmm, 3, ops, vec![1.0 / 3.0; 3])
}

/// `T_y[i][j] = P[i][j] E[j][y]` with stay probability `1-2x`, move
/// probability `x`, and emission accuracy `a`.
pub fn mess3_standard_spec(x: f64, a: f64) -> Result<ProcessSpec> {
    check_unit("x", x)?;
    check_unit("a", a)?;
    if x >= 0.5 {
        return Err(Error::invalid(format!("mess3 transition x={x} must be below 0.5")));
    }
    let p = |i: usize, j: usize| if i == j { 1.0 - 2.0 * x } else { x };
    let e = |s: usize, y: usize| if s == y { a } else { (1.0 - a) / 2.0 };
    let ops = (0..3)
        .map(|y| (0..9).map(|k| p(k / 3, k % 3) * e(k % 3, y)).collect())
        .collect();
    ProcessSpec::new(format!("mess3({x},{a})"), ProcessKind::Hmm, 3, ops, vec![1.0 / 3.0; 3])
}
