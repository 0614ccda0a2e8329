//! Emission probabilities, scaled forward-backward recursions, the exact
//! conditional log-likelihood, smoothed posteriors and the analytic score.
//!
//! Forward variables are rescaled to sum to one at every occasion; the
//! per-occasion normalizers multiply back into the likelihood, so no
//! underflow occurs for any panel length. A brute-force trajectory
//! enumeration is kept alongside as an oracle for small instances.
//!
//! The time-constant model M2 is handled through the same recursions: a
//! class that never changes is a chain with an identity transition matrix.

use crate::chain::ChainLaws;
use crate::data::{Dataset, SubjectPanel};
use crate::error::{Error, Result};
use crate::params::{EmissionParams, LatentParams, ModelKind, ParameterSet};

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log f(y | η) for a Bernoulli-logit response, stable for large |η|.
pub fn log_bernoulli(y: u8, eta: f64) -> f64 {
    let signed = if y == 1 { eta } else { -eta };
    // log σ(signed) = -log(1 + exp(-signed))
    if signed > 0.0 {
        -(-signed).exp().ln_1p()
    } else {
        signed - signed.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Success probability for one occasion in one state.
pub fn success_prob(x1: &[f64], x2: &[f64], em: &EmissionParams, state: usize) -> f64 {
    sigmoid(dot(x1, &em.beta) + dot(x2, &em.u[state]))
}

/// f(y | x1, x2, state): the emission probability of the observed outcome.
///
/// Evaluated as σ(±η) so the failure probability keeps full precision for
/// large predictors (1 - σ(η) would round to zero past η ≈ 37).
pub fn emission_prob(y: u8, x1: &[f64], x2: &[f64], em: &EmissionParams, state: usize) -> f64 {
    let eta = dot(x1, &em.beta) + dot(x2, &em.u[state]);
    sigmoid(if y == 1 { eta } else { -eta })
}

/// Smoothed posteriors for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosteriors {
    /// ξ_tj = Pr(state j at time t | data): S rows of length J.
    pub xi: Vec<Vec<f64>>,
    /// ζ for t = 2..=S: entry `[t - 2][k * J + j]` is
    /// Pr(state k at t-1, state j at t | data). Empty when S = 1.
    pub zeta: Vec<Vec<f64>>,
}

impl SubjectPosteriors {
    pub fn n_states(&self) -> usize {
        self.xi.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }
}

/// Smoothed posteriors for every subject, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub subjects: Vec<SubjectPosteriors>,
}

impl Posteriors {
    /// Average occupancy of each state over all observed subject-times.
    pub fn state_occupancy(&self) -> Vec<f64> {
        let j_states = self.subjects.first().map_or(0, SubjectPosteriors::n_states);
        let mut occ = vec![0.0; j_states];
        let mut total = 0.0;
        for s in &self.subjects {
            for row in &s.xi {
                for (j, x) in row.iter().enumerate() {
                    occ[j] += x;
                }
                total += 1.0;
            }
        }
        for o in occ.iter_mut() {
            *o /= total;
        }
        occ
    }
}

/// The conditional log-likelihood and its per-subject contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub total: f64,
    pub per_subject: Vec<f64>,
}

/// Per-occasion emission probabilities for one subject: S rows of length J.
fn emission_table(panel: &SubjectPanel, em: &EmissionParams) -> Vec<Vec<f64>> {
    let j_states = em.n_states();
    (0..panel.dropout_time)
        .map(|t| {
            (0..j_states)
                .map(|j| emission_prob(panel.responses[t], &panel.x1[t], &panel.x2[t], em, j))
                .collect()
        })
        .collect()
}

/// Scaled forward-backward pass for one subject.
///
/// Returns the subject's log-likelihood contribution and its smoothed
/// posteriors in O(S·J²) time.
pub fn forward_backward(
    panel: &SubjectPanel,
    laws: &ChainLaws,
    em: &EmissionParams,
) -> Result<(f64, SubjectPosteriors)> {
    let s_len = panel.dropout_time;
    let j_states = em.n_states();
    let emis = emission_table(panel, em);

    let degenerate = || Error::DegenerateLikelihood(panel.subject_id.clone());

    // Forward pass with per-occasion normalization.
    let mut alpha = vec![vec![0.0; j_states]; s_len];
    let mut norms = vec![0.0; s_len];
    for j in 0..j_states {
        alpha[0][j] = laws.initial[j] * emis[0][j];
    }
    let mut loglik = 0.0;
    for t in 0..s_len {
        let c: f64 = alpha[t].iter().sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(degenerate());
        }
        norms[t] = c;
        for a in alpha[t].iter_mut() {
            *a /= c;
        }
        loglik += c.ln();
        if t + 1 < s_len {
            for j in 0..j_states {
                let mut acc = 0.0;
                for k in 0..j_states {
                    acc += alpha[t][k] * laws.transition[k][j];
                }
                alpha[t + 1][j] = acc * emis[t + 1][j];
            }
        }
    }

    // Backward pass, scaled by the forward normalizers.
    let mut beta = vec![vec![1.0; j_states]; s_len];
    for t in (0..s_len.saturating_sub(1)).rev() {
        for k in 0..j_states {
            let mut acc = 0.0;
            for j in 0..j_states {
                acc += laws.transition[k][j] * emis[t + 1][j] * beta[t + 1][j];
            }
            beta[t][k] = acc / norms[t + 1];
        }
    }

    let xi: Vec<Vec<f64>> = (0..s_len)
        .map(|t| (0..j_states).map(|j| alpha[t][j] * beta[t][j]).collect())
        .collect();
    let mut zeta = Vec::with_capacity(s_len.saturating_sub(1));
    for t in 1..s_len {
        let mut row = vec![0.0; j_states * j_states];
        for k in 0..j_states {
            for j in 0..j_states {
                row[k * j_states + j] = alpha[t - 1][k] * laws.transition[k][j] * emis[t][j]
                    * beta[t][j]
                    / norms[t];
            }
        }
        zeta.push(row);
    }

    Ok((loglik, SubjectPosteriors { xi, zeta }))
}

/// Hard cap on the trajectory count enumerated by [`brute_force_loglik`].
pub const BRUTE_FORCE_GUARD: usize = 1_000_000;

/// Log-likelihood by explicit summation over all J^S latent trajectories.
///
/// Independent of the recursive implementation; used as an oracle.
pub fn brute_force_loglik(panel: &SubjectPanel, laws: &ChainLaws, em: &EmissionParams) -> Result<f64> {
    let s_len = panel.dropout_time;
    let j_states = em.n_states();
    let n_paths = (j_states as f64).powi(s_len as i32);
    if n_paths > BRUTE_FORCE_GUARD as f64 {
        return Err(Error::BruteForceGuard {
            states: j_states,
            len: s_len,
        });
    }
    let emis = emission_table(panel, em);
    let mut total = 0.0;
    let mut path = vec![0usize; s_len];
    loop {
        let mut p = laws.initial[path[0]] * emis[0][path[0]];
        for t in 1..s_len {
            p *= laws.transition[path[t - 1]][path[t]] * emis[t][path[t]];
        }
        total += p;
        // Next trajectory in base-J counting order.
        let mut pos = 0;
        loop {
            if pos == s_len {
                if total <= 0.0 || !total.is_finite() {
                    return Err(Error::DegenerateLikelihood(panel.subject_id.clone()));
                }
                return Ok(total.ln());
            }
            path[pos] += 1;
            if path[pos] < j_states {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// The chain laws a parameter set implies for a subject with dropout time `s`.
pub fn subject_laws(theta: &ParameterSet, s: usize) -> Result<ChainLaws> {
    match &theta.latent {
        LatentParams::Markov(chain) => chain.chain_laws(s),
        LatentParams::TimeConstant(gamma) => {
            // A time-constant class is a chain that never moves.
            let j_states = gamma.n_states();
            let mut transition = vec![vec![0.0; j_states]; j_states];
            for (k, row) in transition.iter_mut().enumerate() {
                row[k] = 1.0;
            }
            Ok(ChainLaws {
                initial: gamma.probs(s as f64),
                transition,
            })
        }
    }
}

/// Chain laws for every dropout stratum present in the data. Subjects with
/// the same dropout time share laws, so they are built once per stratum.
pub fn laws_by_stratum(
    data: &Dataset,
    theta: &ParameterSet,
) -> Result<std::collections::HashMap<usize, ChainLaws>> {
    let mut map = std::collections::HashMap::new();
    for panel in &data.panels {
        if !map.contains_key(&panel.dropout_time) {
            map.insert(panel.dropout_time, subject_laws(theta, panel.dropout_time)?);
        }
    }
    Ok(map)
}

/// Conditional log-likelihood of a dataset at θ.
pub fn conditional_loglik(data: &Dataset, theta: &ParameterSet) -> Result<LogLikelihood> {
    let laws = laws_by_stratum(data, theta)?;
    let mut per_subject = Vec::with_capacity(data.n_subjects());
    for panel in &data.panels {
        let (ll, _) = forward_backward(panel, &laws[&panel.dropout_time], &theta.emission)?;
        per_subject.push(ll);
    }
    let total = per_subject.iter().sum();
    Ok(LogLikelihood { total, per_subject })
}

/// Smoothed posteriors and the log-likelihood at θ, for every subject.
pub fn smoothed_posteriors(data: &Dataset, theta: &ParameterSet) -> Result<(Posteriors, LogLikelihood)> {
    let laws = laws_by_stratum(data, theta)?;
    let mut subjects = Vec::with_capacity(data.n_subjects());
    let mut per_subject = Vec::with_capacity(data.n_subjects());
    for panel in &data.panels {
        let (ll, post) = forward_backward(panel, &laws[&panel.dropout_time], &theta.emission)?;
        per_subject.push(ll);
        subjects.push(post);
    }
    let total = per_subject.iter().sum();
    Ok((Posteriors { subjects }, LogLikelihood { total, per_subject }))
}

/// Analytic gradient of the conditional log-likelihood over the free
/// parameters, in the canonical flatten order.
///
/// Uses the expected complete-data score at the current smoothed posteriors,
/// which equals the observed-data score. Defined for the parametric chain
/// variant and the time-constant model; the saturated tables are not free
/// parameters in this sense.
pub fn score(data: &Dataset, theta: &ParameterSet) -> Result<Vec<f64>> {
    let kind = theta.model_kind();
    if kind == ModelKind::M1Saturated {
        return Err(Error::InvalidConfig(
            "score is defined for the parametric chain laws only".into(),
        ));
    }
    let j_states = theta.n_states();
    let p1 = theta.emission.p1();
    let p2 = theta.emission.p2();
    let (posteriors, _) = smoothed_posteriors(data, theta)?;

    let mut g_beta = vec![0.0; p1];
    let mut g_u = vec![vec![0.0; p2]; j_states];
    for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
        for t in 0..panel.dropout_time {
            for j in 0..j_states {
                let resid = f64::from(panel.responses[t])
                    - success_prob(&panel.x1[t], &panel.x2[t], &theta.emission, j);
                let w = post.xi[t][j] * resid;
                for d in 0..p1 {
                    g_beta[d] += w * panel.x1[t][d];
                }
                for d in 0..p2 {
                    g_u[j][d] += w * panel.x2[t][d];
                }
            }
        }
    }

    let gamma = match &theta.latent {
        LatentParams::Markov(crate::chain::ChainParams::Parametric(chain)) => &chain.gamma,
        LatentParams::TimeConstant(gamma) => gamma,
        _ => unreachable!(),
    };
    let mut g_gamma = vec![[0.0; 2]; j_states.saturating_sub(1)];
    for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
        let s = panel.dropout_time as f64;
        let probs = gamma.probs(s);
        for h in 0..j_states.saturating_sub(1) {
            let r = post.xi[0][h] - probs[h];
            g_gamma[h][0] += r;
            g_gamma[h][1] += r * s;
        }
    }

    let mut g_phi = Vec::new();
    if let LatentParams::Markov(crate::chain::ChainParams::Parametric(chain)) = &theta.latent {
        g_phi = vec![vec![[0.0; 2]; j_states.saturating_sub(1)]; j_states];
        for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
            let s = panel.dropout_time as f64;
            for k in 0..j_states {
                let probs = chain.phi[k].probs(s);
                for (t, zrow) in post.zeta.iter().enumerate() {
                    let occupancy = post.xi[t][k]; // ξ at the origin time t
                    for h in 0..j_states.saturating_sub(1) {
                        let r = zrow[k * j_states + h] - probs[h] * occupancy;
                        g_phi[k][h][0] += r;
                        g_phi[k][h][1] += r * s;
                    }
                }
            }
        }
    }

    let mut grad = g_beta;
    for gu in g_u {
        grad.extend(gu);
    }
    for c in g_gamma {
        grad.extend(c);
    }
    for row in g_phi {
        for c in row {
            grad.extend(c);
        }
    }
    Ok(grad)
}
