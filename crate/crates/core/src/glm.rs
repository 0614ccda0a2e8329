//! Posterior-weighted regression solvers used inside the M-step.
//!
//! Both objectives are concave, so damped Newton steps with step halving
//! cannot decrease them; that is what makes the outer EM loop monotone even
//! when the inner solvers stop early.

use crate::chain::MultiLogit;
use crate::data::Dataset;
use crate::likelihood::{log_bernoulli, sigmoid, Posteriors};
use crate::params::EmissionParams;
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Inner Newton iteration cap for the M-step blocks.
const MAX_INNER_ITER: usize = 50;
/// Stop when the inner score is this small (sup norm).
const SCORE_TOL: f64 = 1e-8;
/// Stop when the Newton decrement g·d/2 — the attainable objective gain —
/// falls below the f64 noise floor of the objective itself. Without this,
/// iterations near the optimum churn on steps whose gain is unmeasurable.
const DECREMENT_FLOOR: f64 = 1e-13;
/// Step-acceptance slack of a few ulps of the objective.
const ACCEPT_SLACK: f64 = 1e-14;
/// Ridge ladder for near-singular Hessians.
const RIDGE_START: f64 = 1e-6;
const RIDGE_MAX: f64 = 1e-2;
/// Coefficient norm beyond which the emission fit is treated as separated.
const SEPARATION_NORM: f64 = 50.0;
/// Linear predictors past this magnitude have numerically saturated fitted
/// probabilities; reaching one on an observation with posterior weight means
/// the score vanished along a divergent path (quasi-separation).
const SATURATION_ETA: f64 = 20.0;

/// Solve `H d = g` for a symmetric PSD `H`, retrying with a doubling ridge.
fn solve_ridge(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = Cholesky::new(h.clone()) {
        let d = chol.solve(g);
        if d.iter().all(|v| v.is_finite()) {
            return Ok(d);
        }
    }
    let mut ridge = RIDGE_START;
    while ridge <= RIDGE_MAX {
        let mut damped = h.clone();
        for i in 0..h.nrows() {
            damped[(i, i)] += ridge;
        }
        if let Some(chol) = Cholesky::new(damped) {
            let d = chol.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        ridge *= 2.0;
    }
    Err(Error::SingularHessian)
}

/// Outcome of a weighted multinomial-logit fit.
#[derive(Debug, Clone)]
pub struct MultilogitFit {
    pub logit: MultiLogit,
    /// Score tolerance reached within the iteration cap.
    pub converged: bool,
    /// The slope in s was unidentifiable (fewer than two strata with mass)
    /// and was held at its starting value.
    pub slope_frozen: bool,
}

/// Fit a weighted multinomial logit with linear predictor `a_j + b_j s`.
///
/// Each observation is a stratum value `s` with one nonnegative weight per
/// category (reference category last). With `fit_slope` unset the slopes are
/// pinned and only intercepts move.
pub fn fit_multilogit_in_s(
    obs: &[(f64, Vec<f64>)],
    start: &MultiLogit,
    fit_slope: bool,
) -> Result<MultilogitFit> {
    let j_states = start.n_states();
    if j_states == 1 {
        return Ok(MultilogitFit {
            logit: start.clone(),
            converged: true,
            slope_frozen: false,
        });
    }
    let mut active: Vec<&(f64, Vec<f64>)> =
        obs.iter().filter(|(_, w)| w.iter().sum::<f64>() > 0.0).collect();
    active.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if active.is_empty() {
        return Ok(MultilogitFit {
            logit: start.clone(),
            converged: true,
            slope_frozen: false,
        });
    }
    let distinct_s = 1 + active.windows(2).filter(|w| w[0].0 != w[1].0).count();
    let slope_frozen = fit_slope && distinct_s < 2;
    let use_slope = fit_slope && !slope_frozen;
    let ncols = if use_slope { 2 } else { 1 };
    let ncat = j_states - 1;
    let dim = ncat * ncols;

    let mut logit = start.clone();
    let q_value = |l: &MultiLogit| -> f64 {
        active
            .iter()
            .map(|(s, w)| {
                let probs = l.probs(*s);
                w.iter()
                    .zip(&probs)
                    .filter(|(wj, _)| **wj > 0.0)
                    .map(|(wj, pj)| wj * pj.ln())
                    .sum::<f64>()
            })
            .sum()
    };

    let mut converged = false;
    for _ in 0..MAX_INNER_ITER {
        let mut grad = DVector::zeros(dim);
        let mut neg_hess = DMatrix::zeros(dim, dim);
        for (s, w) in &active {
            let probs = logit.probs(*s);
            let mass: f64 = w.iter().sum();
            let x = [1.0, *s];
            for h in 0..ncat {
                let r = w[h] - mass * probs[h];
                for a in 0..ncols {
                    grad[h * ncols + a] += r * x[a];
                }
                for g in 0..ncat {
                    let cross = mass * probs[h] * (f64::from(u8::from(h == g)) - probs[g]);
                    for a in 0..ncols {
                        for b in 0..ncols {
                            neg_hess[(h * ncols + a, g * ncols + b)] += cross * x[a] * x[b];
                        }
                    }
                }
            }
        }
        if grad.amax() <= SCORE_TOL {
            converged = true;
            break;
        }
        let direction = solve_ridge(&neg_hess, &grad)?;
        let q0 = q_value(&logit);
        if grad.dot(&direction) / 2.0 <= DECREMENT_FLOOR * q0.abs().max(1.0) {
            converged = true;
            break;
        }
        let slack = ACCEPT_SLACK * q0.abs().max(1.0);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = logit.clone();
            for h in 0..ncat {
                cand.coef[h][0] += step * direction[h * ncols];
                if use_slope {
                    cand.coef[h][1] += step * direction[h * ncols + 1];
                }
            }
            let qc = q_value(&cand);
            if qc.is_finite() && qc >= q0 - slack {
                logit = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // numerically stationary
        }
    }
    Ok(MultilogitFit {
        logit,
        converged,
        slope_frozen,
    })
}

/// Outcome of the posterior-weighted emission fit.
#[derive(Debug, Clone)]
pub struct EmissionFit {
    pub params: EmissionParams,
    pub converged: bool,
    /// Coefficients ran away (quasi-separation); iteration was capped.
    pub separation: bool,
}

/// Fit (β, u_1..u_J) by Newton steps on the posterior-weighted
/// Bernoulli-logit log-likelihood pooled over subjects, occasions and states.
pub fn fit_weighted_emission(
    data: &Dataset,
    posteriors: &Posteriors,
    start: &EmissionParams,
) -> Result<EmissionFit> {
    let j_states = start.n_states();
    let p1 = start.p1();
    let p2 = start.p2();
    let dim = p1 + j_states * p2;
    let mut flat = flatten_emission(start);

    let q_value = |flat: &[f64]| -> f64 {
        let em = unflatten_emission(flat, j_states, p1, p2);
        let mut q = 0.0;
        for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
            for t in 0..panel.dropout_time {
                for j in 0..j_states {
                    let w = post.xi[t][j];
                    if w == 0.0 {
                        continue;
                    }
                    let eta = predictor(&em, &panel.x1[t], &panel.x2[t], j);
                    q += w * log_bernoulli(panel.responses[t], eta);
                }
            }
        }
        q
    };

    // Nonzero design columns per state: x1 block, then state j's x2 block.
    let state_cols: Vec<Vec<usize>> = (0..j_states)
        .map(|j| {
            (0..p1)
                .chain((0..p2).map(|d| p1 + j * p2 + d))
                .collect()
        })
        .collect();

    let mut converged = false;
    let mut separation = false;
    let mut q_current = q_value(&flat);
    for _ in 0..MAX_INNER_ITER {
        let em = unflatten_emission(&flat, j_states, p1, p2);
        let mut grad = DVector::zeros(dim);
        let mut neg_hess = DMatrix::zeros(dim, dim);
        let mut z = vec![0.0; dim];
        for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
            for t in 0..panel.dropout_time {
                for (j, idx) in state_cols.iter().enumerate() {
                    let w = post.xi[t][j];
                    if w == 0.0 {
                        continue;
                    }
                    let eta = predictor(&em, &panel.x1[t], &panel.x2[t], j);
                    let p = sigmoid(eta);
                    let resid = f64::from(panel.responses[t]) - p;
                    for d in 0..p1 {
                        z[d] = panel.x1[t][d];
                    }
                    for d in 0..p2 {
                        z[p1 + j * p2 + d] = panel.x2[t][d];
                    }
                    let curvature = w * p * (1.0 - p);
                    for &a in idx {
                        grad[a] += w * resid * z[a];
                        for &b in idx {
                            neg_hess[(a, b)] += curvature * z[a] * z[b];
                        }
                    }
                }
            }
        }
        if grad.amax() <= SCORE_TOL {
            converged = true;
            break;
        }
        let direction = solve_ridge(&neg_hess, &grad)?;
        if grad.dot(&direction) / 2.0 <= DECREMENT_FLOOR * q_current.abs().max(1.0) {
            converged = true;
            break;
        }
        let slack = ACCEPT_SLACK * q_current.abs().max(1.0);
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..40 {
            let cand: Vec<f64> = flat
                .iter()
                .zip(direction.iter())
                .map(|(v, d)| v + step * d)
                .collect();
            let qc = q_value(&cand);
            if qc.is_finite() && qc >= q_current - slack {
                flat = cand;
                q_current = qc.max(q_current);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let norm: f64 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > SEPARATION_NORM {
            separation = true;
            break;
        }
    }
    let params = unflatten_emission(&flat, j_states, p1, p2);
    if !separation {
        let mut max_eta: f64 = 0.0;
        for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
            for t in 0..panel.dropout_time {
                for j in 0..j_states {
                    if post.xi[t][j] > 1e-8 {
                        max_eta = max_eta.max(predictor(&params, &panel.x1[t], &panel.x2[t], j).abs());
                    }
                }
            }
        }
        separation = max_eta > SATURATION_ETA;
    }
    Ok(EmissionFit {
        params,
        converged,
        separation,
    })
}

fn predictor(em: &EmissionParams, x1: &[f64], x2: &[f64], state: usize) -> f64 {
    let fixed: f64 = x1.iter().zip(&em.beta).map(|(x, b)| x * b).sum();
    let varying: f64 = x2.iter().zip(&em.u[state]).map(|(x, u)| x * u).sum();
    fixed + varying
}

fn flatten_emission(em: &EmissionParams) -> Vec<f64> {
    let mut flat = em.beta.clone();
    for uj in &em.u {
        flat.extend(uj);
    }
    flat
}

fn unflatten_emission(flat: &[f64], j_states: usize, p1: usize, p2: usize) -> EmissionParams {
    let beta = flat[..p1].to_vec();
    let u = (0..j_states)
        .map(|j| flat[p1 + j * p2..p1 + (j + 1) * p2].to_vec())
        .collect();
    EmissionParams { beta, u }
}
