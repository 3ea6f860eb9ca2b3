// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::processes::CompositeSpec;
use crate::transformer::{generate_steered, Lm, SteerMode, SteerRequest};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub scales: Vec<f32>,
    pub modes: Vec<SteerMode>,
    pub k_sustain: usize,
    /// Generated tokens per prompt.
    pub length: usize,
    pub prompts_per_vertex: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self { scales: vec![1.0, 5.0, 20.0], modes: SteerMode::ALL.to_vec(), k_sustain: 2, length: 4, prompts_per_vertex: 16 }
    }
}

/// How the goal belief of each vertex is formed from its near-vertex beliefs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteeringTarget {
    /// Indicator of the dominant hidden state of the centroid.
    OneHot,
    /// The centroid itself.
    Centroid,
}

impl SteeringTarget {
    /// Goal belief from the beliefs of one vertex's near-vertex rows.
    pub fn goal(self, beliefs: &[&[f64]]) -> Option<Vec<f64>> {
        let s = beliefs.first()?.len();
        let mut c = vec![0.0; s];
        for b in beliefs {
            for (ci, bi) in c.iter_mut().zip(b.iter()) {
                *ci += bi / beliefs.len() as f64;
            }
        }
        Some(match self {
            SteeringTarget::Centroid => c,
            SteeringTarget::OneHot => {
                let arg = c.iter().enumerate().fold(0, |b, (i, &v)| if v > c[b] { i } else { b });
                (0..s).map(|i| f64::from(u8::from(i == arg))).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub source: usize,
    pub target: usize,
    pub mode: SteerMode,
    pub scale: f32,
    pub successes: usize,
    pub trials: usize,
}

impl PairScore {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    /// Mean success over pairs, modes and the configured scales.
    pub score: f64,
    /// Same average at scale 0.
    pub control: f64,
    pub pairs: Vec<PairScore>,
    /// Vertices without prompts; pairs involving them were skipped.
    pub skipped_vertices: Vec<usize>,
    /// Continuations the filter rejected as impossible; counted as failures.
    pub impossible: usize,
}

/// Steers prompts drawn near each source vertex along `delta(source, target)`
/// and scores whether the filtered belief of `component` at the end of the
/// continuation lands strictly closer to the target's goal than without
/// steering.
///
/// `prompts[v]` are token prefixes ending at a position near vertex `v`;
/// `goals[v]` the goal belief of vertex `v`; `delta` returns a residual
/// direction of length `d_model`.
#[allow(clippy::too_many_arguments)]
pub fn steering_score(
    lm: &Lm,
    spec: &CompositeSpec,
    component: usize,
    layer: usize,
    prompts: &[Vec<Vec<usize>>],
    goals: &[Vec<f64>],
    mut delta: impl FnMut(usize, usize) -> Result<Vec<f32>>,
    cfg: &SteeringConfig,
) -> Result<SteeringResult> {
    let k = prompts.len();
    if goals.len() != k {
        return Err(Error::invalid("one goal per vertex required"));
    }
    if component >= spec.n_components() {
        return Err(Error::invalid(format!("component {component} out of range")));
    }
    let skipped_vertices: Vec<usize> = (0..k).filter(|&v| prompts[v].is_empty()).collect();
    if k - skipped_vertices.len() < 2 {
        return Err(Error::InsufficientData("fewer than two vertices have prompts".into()));
    }
    if !skipped_vertices.is_empty() {
        log::warn!("steering skips vertices without prompts: {skipped_vertices:?}");
    }
    let mut impossible = 0;
    let mut final_belief = |prompt: &[usize], cont: &[usize]| -> Option<Vec<f64>> {
        let toks: Vec<usize> = prompt.iter().chain(cont).copied().collect();
        match spec.filter(&toks) {
            Ok(b) => b.last().map(|last| last[component].weights().to_vec()),
            Err(Error::ImpossibleSymbol { .. }) => {
                impossible += 1;
                None
            }
            Err(_) => None,
        }
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();

    let zero = vec![0.0f32; lm.cfg.d_model];
    let mut baseline: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(k);
    for ps in prompts {
        let mut row = Vec::new();
        for p in ps.iter().take(cfg.prompts_per_vertex) {
            let req = SteerRequest { layer, delta: &zero, scale: 0.0, mode: SteerMode::Type1, k_sustain: cfg.k_sustain, length: cfg.length };
            let cont = generate_steered(lm, p, &req)?;
            row.push(final_belief(p, &cont));
        }
        baseline.push(row);
    }

    let mut scales = vec![0.0f32];
    scales.extend(cfg.scales.iter().copied().filter(|&s| s != 0.0));
    let mut pairs = Vec::new();
    for s in 0..k {
        for t in 0..k {
            if s == t || prompts[s].is_empty() || prompts[t].is_empty() {
                continue;
            }
            let d = delta(s, t)?;
            for &mode in &cfg.modes {
                for &scale in &scales {
                    let mut score = PairScore { source: s, target: t, mode, scale, successes: 0, trials: 0 };
                    for (p, base) in prompts[s].iter().zip(&baseline[s]) {
                        let req = SteerRequest { layer, delta: &d, scale, mode, k_sustain: cfg.k_sustain, length: cfg.length };
                        let cont = generate_steered(lm, p, &req)?;
                        score.trials += 1;
                        if let (Some(b), Some(after)) = (base, final_belief(p, &cont)) {
                            if dist(&after, &goals[t]) < dist(b, &goals[t]) {
                                score.successes += 1;
                            }
                        }
                    }
                    pairs.push(score);
                }
            }
        }
    }
    let mean = |pick: &dyn Fn(&PairScore) -> bool| {
        let v: Vec<f64> = pairs.iter().filter(|p| pick(p)).map(PairScore::rate).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let score = mean(&|p| p.scale != 0.0);
    let control = mean(&|p| p.scale == 0.0);
    Ok(SteeringResult { score, control, pairs, skipped_vertices, impossible })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goals_from_beliefs() {
        let a = [0.7, 0.2, 0.1];
        let b = [0.5, 0.4, 0.1];
        assert_eq!(SteeringTarget::OneHot.goal(&[&a, &b]).unwrap(), vec![1.0, 0.0, 0.0]);
        let c = SteeringTarget::Centroid.goal(&[&a, &b]).unwrap();
        assert!((c[1] - 0.3).abs() < 1e-12);
        assert!(SteeringTarget::OneHot.goal(&[]).is_none());
    }
}
