//! Dropout-conditional laws of the hidden chain.
//!
//! Both the initial distribution and each transition-matrix row are
//! multinomial logits in the dropout time s, with the last state as the
//! reference category (its linear predictor is pinned at zero). The
//! saturated variant instead stores one raw probability table per dropout
//! stratum and is updated in closed form.

use crate::error::{Error, Result};

/// Numerically safe softmax: exponentiation after max-subtraction, so adding
/// a common constant to every predictor leaves the result unchanged.
pub fn softmax(etas: &[f64]) -> Vec<f64> {
    let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = etas.iter().map(|&e| (e - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// A multinomial logit over J categories with linear predictor
/// `a_j + b_j * s` for j < J and the last category as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLogit {
    /// `(intercept, slope)` per non-reference category; length J - 1.
    pub coef: Vec<[f64; 2]>,
}

impl MultiLogit {
    /// All-zero coefficients: the uniform distribution at every s.
    pub fn zeros(n_states: usize) -> Self {
        assert!(n_states >= 1);
        Self {
            coef: vec![[0.0, 0.0]; n_states - 1],
        }
    }

    pub fn n_states(&self) -> usize {
        self.coef.len() + 1
    }

    /// Category probabilities at dropout time `s`.
    pub fn probs(&self, s: f64) -> Vec<f64> {
        let mut etas: Vec<f64> = self.coef.iter().map(|c| c[0] + c[1] * s).collect();
        etas.push(0.0);
        softmax(&etas)
    }
}

/// Chain parameters for the parametric (logit-in-s) variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParamsParametric {
    /// Initial-state logit (the γ block).
    pub gamma: MultiLogit,
    /// One logit per transition-origin state (the φ block); length J.
    pub phi: Vec<MultiLogit>,
}

impl ChainParamsParametric {
    /// Uniform chain: all coefficients zero.
    pub fn uniform(n_states: usize) -> Self {
        Self {
            gamma: MultiLogit::zeros(n_states),
            phi: vec![MultiLogit::zeros(n_states); n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.gamma.n_states()
    }

    /// Initial state probabilities given dropout time `s`.
    pub fn initial_probs(&self, s: usize) -> Vec<f64> {
        self.gamma.probs(s as f64)
    }

    /// Row-stochastic transition matrix given dropout time `s`.
    pub fn transition_matrix(&self, s: usize) -> Vec<Vec<f64>> {
        self.phi.iter().map(|row| row.probs(s as f64)).collect()
    }
}

/// Chain parameters for the saturated variant: raw per-stratum tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParamsSaturated {
    /// `initial[t - 1]` is the initial vector for stratum S = t.
    pub initial: Vec<Vec<f64>>,
    /// `transition[t - 1]` is the J×J matrix for stratum S = t.
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl ChainParamsSaturated {
    /// Uniform tables for strata 1..=horizon.
    pub fn uniform(n_states: usize, horizon: usize) -> Self {
        let j = n_states as f64;
        Self {
            initial: vec![vec![1.0 / j; n_states]; horizon],
            transition: vec![vec![vec![1.0 / j; n_states]; n_states]; horizon],
        }
    }

    pub fn n_states(&self) -> usize {
        self.initial.first().map_or(1, Vec::len)
    }

    pub fn horizon(&self) -> usize {
        self.initial.len()
    }
}

/// The initial vector and transition matrix one subject's chain obeys.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLaws {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

/// Either chain parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainParams {
    Parametric(ChainParamsParametric),
    Saturated(ChainParamsSaturated),
}

impl ChainParams {
    pub fn n_states(&self) -> usize {
        match self {
            ChainParams::Parametric(p) => p.n_states(),
            ChainParams::Saturated(p) => p.n_states(),
        }
    }

    /// The laws for a subject with dropout time `s`. Subjects sharing `s`
    /// share their laws, and the chain is time-homogeneous within a subject.
    pub fn chain_laws(&self, s: usize) -> Result<ChainLaws> {
        match self {
            ChainParams::Parametric(p) => Ok(ChainLaws {
                initial: p.initial_probs(s),
                transition: p.transition_matrix(s),
            }),
            ChainParams::Saturated(p) => {
                if s == 0 || s > p.initial.len() {
                    return Err(Error::UnseenStratum(s));
                }
                Ok(ChainLaws {
                    initial: p.initial[s - 1].clone(),
                    transition: p.transition[s - 1].clone(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_coefficients_give_uniform() {
        let logit = MultiLogit::zeros(2);
        assert_eq!(logit.probs(3.0), vec![0.5, 0.5]);
        let chain = ChainParamsParametric::uniform(3);
        for row in chain.transition_matrix(7) {
            for p in row {
                assert_close(p, 1.0 / 3.0, 1e-15);
            }
        }
    }

    #[test]
    fn initial_probs_match_direct_evaluation() {
        // γ = (2.0, -0.5): at s = 4 the predictor vanishes, at s = 2 it is 1.
        let gamma = MultiLogit {
            coef: vec![[2.0, -0.5]],
        };
        let p4 = gamma.probs(4.0);
        assert_close(p4[0], 0.5, 1e-12);
        assert_close(p4[1], 0.5, 1e-12);
        let p2 = gamma.probs(2.0);
        let e = 1f64.exp();
        assert_close(p2[0], e / (1.0 + e), 1e-12);
        assert_close(p2[1], 1.0 / (1.0 + e), 1e-12);
        // Brute-force softmax cross-check.
        let brute = [(1f64).exp(), 1.0];
        let z: f64 = brute.iter().sum();
        assert_close(p2[0], brute[0] / z, 1e-14);
    }

    #[test]
    fn transition_rows_match_direct_evaluation() {
        let chain = ChainParamsParametric {
            gamma: MultiLogit::zeros(2),
            phi: vec![
                MultiLogit {
                    coef: vec![[5.0, -1.5]],
                },
                MultiLogit {
                    coef: vec![[5.0, -0.75]],
                },
            ],
        };
        let e2 = 2f64.exp();
        let m = chain.transition_matrix(2);
        assert_close(m[0][0], e2 / (1.0 + e2), 1e-12);
        assert_close(m[0][1], 1.0 / (1.0 + e2), 1e-12);
        let m = chain.transition_matrix(4);
        assert_close(m[1][0], e2 / (1.0 + e2), 1e-12);
    }

    #[test]
    fn laws_are_shared_within_a_stratum_and_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let j = rng.random_range(1..=4);
            let mut chain = ChainParamsParametric::uniform(j);
            for c in chain.gamma.coef.iter_mut() {
                *c = [rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0)];
            }
            for row in chain.phi.iter_mut() {
                for c in row.coef.iter_mut() {
                    *c = [rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0)];
                }
            }
            let s = rng.random_range(1..=10usize);
            let params = ChainParams::Parametric(chain);
            let laws = params.chain_laws(s).unwrap();
            assert_eq!(laws, params.chain_laws(s).unwrap());
            assert_close(laws.initial.iter().sum::<f64>(), 1.0, 1e-12);
            for row in &laws.transition {
                assert_close(row.iter().sum::<f64>(), 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn zero_slopes_make_laws_constant_in_s() {
        let mut chain = ChainParamsParametric::uniform(3);
        chain.gamma.coef = vec![[0.4, 0.0], [-0.3, 0.0]];
        for row in chain.phi.iter_mut() {
            for c in row.coef.iter_mut() {
                c[0] = 0.7;
            }
        }
        let params = ChainParams::Parametric(chain);
        let a = params.chain_laws(1).unwrap();
        let b = params.chain_laws(9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.random_range(1..=5);
            let etas: Vec<f64> = (0..n).map(|_| rng.random_range(-40.0..40.0)).collect();
            let c = rng.random_range(-700.0..700.0);
            let shifted: Vec<f64> = etas.iter().map(|e| e + c).collect();
            let a = softmax(&etas);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                assert_close(*x, *y, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_survives_extreme_predictors() {
        let p = softmax(&[5000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        let p = softmax(&[-5000.0, 0.0]);
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn saturated_lookup_and_unseen_stratum() {
        let params = ChainParams::Saturated(ChainParamsSaturated {
            initial: vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            transition: vec![
                vec![vec![0.5, 0.5], vec![0.1, 0.9]],
                vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            ],
        });
        let laws = params.chain_laws(2).unwrap();
        assert_eq!(laws.initial, vec![0.6, 0.4]);
        assert!(matches!(params.chain_laws(3), Err(Error::UnseenStratum(3))));
    }

    #[test]
    fn single_state_chain_is_degenerate() {
        let params = ChainParams::Parametric(ChainParamsParametric::uniform(1));
        let laws = params.chain_laws(5).unwrap();
        assert_eq!(laws.initial, vec![1.0]);
        assert_eq!(laws.transition, vec![vec![1.0]]);
    }
}
