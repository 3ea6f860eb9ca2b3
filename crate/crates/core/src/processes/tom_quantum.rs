// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bloch-walk qubit process as a three-dimensional GHMM.
//!
//! The hidden state is a qubit whose Bloch vector stays in the x-z plane.
//! Each step rotates it by `alpha` radians about the y axis, then applies a
//! four-outcome measurement along `+x, +z, -x, -z` with strength
//! `eta = beta / pi`:
//!
//! ```text
//! E_k = (I + eta * m_k . sigma) / 4,   K_k = sqrt(E_k),
//! rho -> K_y U rho U^T K_y,            P(y) = tr(E_y U rho U^T).
//! ```
//!
//! Density matrices are expanded in the frame of three pure states
//! `rho_k = (I + n_k . sigma) / 2` with `n_k` at 90, 210 and 330 degrees.
//! Coefficients in that frame sum to the trace, so `sum_y T_y` has unit row
//! sums, but states outside the inscribed triangle get negative weights.

use super::{ProcessKind, ProcessSpec};
use crate::{Error, Result};

type M2 = [[f64; 2]; 2];

fn frame_angles() -> [f64; 3] {
    let base = std::f64::consts::FRAC_PI_2;
    let step = 2.0 * std::f64::consts::PI / 3.0;
    [base, base + step, base + 2.0 * step]
}

/// Unit Bloch vectors `(x, z)` of the three frame states.
fn frame() -> [[f64; 2]; 3] {
    frame_angles().map(|t| [t.cos(), t.sin()])
}

fn mm(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn transpose(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// `(I + rx sigma_x + rz sigma_z) * scale`.
fn bloch_matrix(rx: f64, rz: f64, scale: f64) -> M2 {
    [[scale * (1.0 + rz), scale * rx], [scale * rx, scale * (1.0 - rz)]]
}

/// Frame coefficients of a real symmetric 2x2 matrix.
fn frame_coeffs(m: &M2, inv: &nalgebra::Matrix3<f64>) -> [f64; 3] {
    let c = nalgebra::Vector3::new((m[0][0] + m[1][1]) / 2.0, m[0][1], (m[0][0] - m[1][1]) / 2.0);
    let w = inv * c;
    [w[0], w[1], w[2]]
}

/// Bloch-walk GHMM with rotation `alpha` (radians) and measurement
/// strength `beta / pi`; requires `0 < beta < pi`.
pub fn tom_quantum_spec(alpha: f64, beta: f64) -> Result<ProcessSpec> {
    if !alpha.is_finite() || !(beta > 0.0 && beta < std::f64::consts::PI) {
        return Err(Error::SpecConstruction(format!(
            "tom quantum parameters (alpha={alpha}, beta={beta}) outside alpha finite, 0 < beta < pi"
        )));
    }
    let eta = beta / std::f64::consts::PI;
    let (c, s) = ((alpha / 2.0).cos(), (alpha / 2.0).sin());
    let u: M2 = [[c, -s], [s, c]];
    let ut = transpose(&u);
    let (sp, sm) = ((1.0 + eta).sqrt(), (1.0 - eta).sqrt());
    let kraus: Vec<M2> = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]
        .iter()
        .map(|m| {
            // sqrt((I + eta m.sigma)/4) = (sp + sm)/4 I + (sp - sm)/4 m.sigma
            let (a, b) = ((sp + sm) / 4.0, (sp - sm) / 4.0);
            [[a + b * m[1], b * m[0]], [b * m[0], a - b * m[1]]]
        })
        .collect();

    let fr = frame();
    // columns: (trace/2, x, z) coordinates of each frame state
    let basis = nalgebra::Matrix3::from_fn(|r, col| match r {
        0 => 0.5,
        1 => fr[col][0] / 2.0,
        _ => fr[col][1] / 2.0,
    });
    let inv = basis
        .try_inverse()
        .ok_or_else(|| Error::SpecConstruction("degenerate Bloch frame".into()))?;

    let mut ops = Vec::with_capacity(4);
    for k in &kraus {
        let mut op = vec![0.0; 9];
        for (i, n) in fr.iter().enumerate() {
            let rho = bloch_matrix(n[0], n[1], 0.5);
            let out = mm(&mm(&mm(k, &u), &mm(&rho, &ut)), k);
            let w = frame_coeffs(&out, &inv);
            op[i * 3..i * 3 + 3].copy_from_slice(&w);
        }
        ops.push(op);
    }
    // maximally mixed state: equal weights on the symmetric frame
    let spec = ProcessSpec::new(
        format!("tom_quantum({alpha},{beta})"),
        ProcessKind::Ghmm,
        3,
        ops,
        vec![1.0 / 3.0; 3],
    )?;
    // the normalizer b T_y 1 = (1 + eta m_y . r) / 4 >= (1 - eta) / 4 on the Bloch disk
    if 1.0 - eta <= 0.0 {
        return Err(Error::SpecConstruction("measurement strength 1 makes the filter non-normalizable".into()));
    }
    Ok(spec)
}

/// Bloch coordinates `(x, z)` of a frame-coefficient belief.
pub fn bloch_coords(weights: &[f64]) -> [f64; 2] {
    let fr = frame();
    let mut r = [0.0; 2];
    for (w, n) in weights.iter().zip(fr.iter()) {
        r[0] += w * n[0];
        r[1] += w * n[1];
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::BeliefPoint;
    use rand::Rng;

    #[test]
    fn toy_instances_are_valid_four_symbol_specs() {
        for (a, b) in [(1.51, 3.07), (1.99, 2.51)] {
            let s = tom_quantum_spec(a, b).unwrap();
            assert_eq!(s.n_symbols, 4);
            assert_eq!(s.kind, ProcessKind::Ghmm);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(tom_quantum_spec(1.0, 0.0).is_err());
        assert!(tom_quantum_spec(1.0, std::f64::consts::PI).is_err());
        assert!(tom_quantum_spec(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn emission_probabilities_match_born_rule() {
        let (alpha, beta) = (1.51, 3.07);
        let s = tom_quantum_spec(alpha, beta).unwrap();
        let eta = beta / std::f64::consts::PI;
        let mut b = s.initial();
        let mut rng = crate::rng::seeded(3);
        for _ in 0..200 {
            let r = bloch_coords(b.weights());
            // rotate by alpha about y: (x, z) -> (x cos a + z sin a, -x sin a + z cos a)
            let (ca, sa) = (alpha.cos(), alpha.sin());
            let rr = [r[0] * ca + r[1] * sa, -r[0] * sa + r[1] * ca];
            let probs = s.symbol_probs(&b);
            let ms = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
            for (p, m) in probs.iter().zip(ms) {
                let born = (1.0 + eta * (m[0] * rr[0] + m[1] * rr[1])) / 4.0;
                assert!((p - born).abs() < 1e-12, "{p} vs {born}");
            }
            let y = rng.random_range(0..4);
            b = s.belief_update(&b, y).unwrap();
            let r = bloch_coords(b.weights());
            assert!(r[0] * r[0] + r[1] * r[1] <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn frame_states_round_trip() {
        for (i, n) in frame().iter().enumerate() {
            let mut w = [0.0; 3];
            w[i] = 1.0;
            let r = bloch_coords(&w);
            assert!((r[0] - n[0]).abs() < 1e-15 && (r[1] - n[1]).abs() < 1e-15);
        }
        let c = bloch_coords(BeliefPoint(vec![1.0 / 3.0; 3]).weights());
        assert!(c[0].abs() < 1e-15 && c[1].abs() < 1e-15);
    }
}
