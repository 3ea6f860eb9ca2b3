// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent product of processes with a mixed-radix joint alphabet.

use rand::Rng;

use super::{mess3, tom_quantum_spec, BeliefPoint, Mess3Convention, ProcessSpec};
use crate::{Error, Result};

/// Independent components emitting one joint symbol per step.
///
/// The joint symbol is the mixed-radix number of the component symbols,
/// most-significant component first.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSpec {
    pub components: Vec<ProcessSpec>,
    pub radices: Vec<usize>,
}

/// Tokens plus `beliefs[t][c]`, the filter state of component `c` after
/// observing tokens `0..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub tokens: Vec<usize>,
    pub beliefs: Vec<Vec<BeliefPoint>>,
}

/// The five components of the multipartite toy process, in token order:
/// two Bloch walks (radix 4) then three Mess3 (radix 3).
pub fn toy_components(convention: Mess3Convention) -> Result<Vec<ProcessSpec>> {
    let mut out = Vec::with_capacity(5);
    for (name, (a, b)) in [("tom_quantum", (1.51, 3.07)), ("tom_quantum_1", (1.99, 2.51))] {
        let mut s = tom_quantum_spec(a, b)?;
        s.name = name.into();
        out.push(s);
    }
    for (name, (x, a)) in [("mess3", (0.05, 0.85)), ("mess3_1", (0.075, 0.90)), ("mess3_2", (0.10, 0.95))] {
        let mut s = mess3(x, a, convention)?;
        s.name = name.into();
        out.push(s);
    }
    Ok(out)
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    // round-off: last symbol with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl CompositeSpec {
    pub fn compose(components: Vec<ProcessSpec>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("compose needs at least one component"));
        }
        let radices = components.iter().map(|c| c.n_symbols).collect();
        Ok(Self { components, radices })
    }

    pub fn vocab_size(&self) -> usize {
        self.radices.iter().product()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn encode(&self, symbols: &[usize]) -> usize {
        assert_eq!(symbols.len(), self.radices.len(), "one symbol per component");
        symbols.iter().zip(&self.radices).fold(0, |acc, (&s, &r)| {
            assert!(s < r, "symbol {s} out of range for radix {r}");
            acc * r + s
        })
    }

    pub fn decode(&self, token: usize) -> Vec<usize> {
        assert!(token < self.vocab_size(), "token {token} out of range");
        let mut out = vec![0; self.radices.len()];
        let mut t = token;
        for (o, &r) in out.iter_mut().zip(&self.radices).rev() {
            *o = t % r;
            t /= r;
        }
        out
    }

    /// Samples one path of `length` joint tokens with exact per-component beliefs.
    pub fn sample_path_with<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> SampledPath {
        let mut beliefs: Vec<BeliefPoint> = self.components.iter().map(ProcessSpec::initial).collect();
        let mut tokens = Vec::with_capacity(length);
        let mut path = Vec::with_capacity(length);
        let mut symbols = vec![0; self.components.len()];
        for t in 0..length {
            for (c, spec) in self.components.iter().enumerate() {
                let probs = spec.symbol_probs(&beliefs[c]);
                let y = sample_index(&probs, rng);
                symbols[c] = y;
                beliefs[c] = spec
                    .update_at(&beliefs[c], y, t)
                    .expect("sampled symbols have positive probability");
            }
            tokens.push(self.encode(&symbols));
            path.push(beliefs.clone());
        }
        SampledPath { tokens, beliefs: path }
    }

    pub fn sample_path(&self, length: usize, seed: u64) -> SampledPath {
        assert!(length >= 1, "sample_path needs length >= 1");
        self.sample_path_with(length, &mut crate::rng::seeded(seed))
    }

    /// Filters a token sequence; `out[t][c]` as in [`SampledPath::beliefs`].
    pub fn filter(&self, tokens: &[usize]) -> Result<Vec<Vec<BeliefPoint>>> {
        let mut beliefs: Vec<BeliefPoint> = self.components.iter().map(ProcessSpec::initial).collect();
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            for (c, y) in self.decode(tok).into_iter().enumerate() {
                beliefs[c] = self.components[c].update_at(&beliefs[c], y, t)?;
            }
            out.push(beliefs.clone());
        }
        Ok(out)
    }

    /// Joint next-token distribution given per-component beliefs.
    pub fn next_token_probs(&self, beliefs: &[BeliefPoint]) -> Vec<f64> {
        let per: Vec<Vec<f64>> =
            self.components.iter().zip(beliefs).map(|(s, b)| s.symbol_probs(b)).collect();
        (0..self.vocab_size())
            .map(|tok| self.decode(tok).iter().enumerate().map(|(c, &y)| per[c][y]).product())
            .collect()
    }

    /// Unigram law under each component's stationary belief.
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let st: Vec<BeliefPoint> = self.components.iter().map(ProcessSpec::stationary_belief).collect();
        self.next_token_probs(&st)
    }

    /// `sum_y T_y` of the joint process (Kronecker product of the components').
    pub fn joint_total_operator(&self) -> (usize, Vec<f64>) {
        let mut n = 1usize;
        let mut acc = vec![1.0];
        for c in &self.components {
            let t = c.total_operator();
            let m = c.n_states;
            let mut next = vec![0.0; n * m * n * m];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..m {
                        for l in 0..m {
                            next[(i * m + k) * (n * m) + j * m + l] = acc[i * n + j] * t[k * m + l];
                        }
                    }
                }
            }
            n *= m;
            acc = next;
        }
        (n, acc)
    }
}
