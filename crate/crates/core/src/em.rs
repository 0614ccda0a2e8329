//! EM estimation for both models, with the short-run multi-start protocol
//! and an optional quasi-Newton polish near the optimum.
//!
//! The M-step splits into three blocks (initial law, transition laws,
//! emission coefficients) that are maximized separately given the smoothed
//! posteriors. Each block solver only ever accepts improving steps from its
//! warm start, which keeps the outer log-likelihood trace monotone even when
//! the inner solvers stop early. A decreasing trace therefore signals an
//! implementation bug and is a hard error.

use crate::chain::{ChainParams, ChainParamsParametric, ChainParamsSaturated, MultiLogit};
use crate::config::{ChainVariant, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{fit_multilogit_in_s, fit_weighted_emission};
use crate::likelihood::{smoothed_posteriors, LogLikelihood, Posteriors, SubjectPosteriors};
use crate::params::{EmissionParams, LatentParams, ModelKind, ParameterSet};
use crate::{derive_seed, optim};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Settings for the EM protocol.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Relative log-likelihood change stopping the exploratory short runs.
    pub short_run_threshold: f64,
    /// Relative log-likelihood change declaring final convergence.
    pub final_tol: f64,
    /// Number of random starts for the short-run phase.
    pub n_short_starts: usize,
    /// How many ranked candidates advance to long runs.
    pub n_retained: usize,
    /// Iteration cap for any single EM run.
    pub max_iter: usize,
    /// Polish the best fit with a quasi-Newton ascent (parametric laws only).
    /// The ascent starts from the EM output, which the final tolerance has
    /// already brought within the near-stationary hand-over region.
    pub refine_with_newton: bool,
    /// Fit the dropout-time slopes of the latent laws; with `false` they are
    /// pinned at zero (dropout-independent latent structure).
    pub chain_slope: bool,
    /// Master seed for start generation.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            short_run_threshold: 1e-2,
            final_tol: 1e-5,
            n_short_starts: 20,
            n_retained: 10,
            max_iter: 1000,
            refine_with_newton: true,
            chain_slope: true,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.short_run_threshold > 0.0 && self.final_tol > 0.0) {
            return Err(Error::InvalidConfig("EM tolerances must be positive".into()));
        }
        if self.short_run_threshold <= self.final_tol {
            return Err(Error::InvalidConfig(
                "short_run_threshold must exceed final_tol".into(),
            ));
        }
        if self.n_short_starts == 0 || self.n_retained == 0 {
            return Err(Error::InvalidConfig(
                "n_short_starts and n_retained must be >= 1".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Warning flags accumulated over a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitFlags {
    /// Emission coefficients ran toward a separated configuration.
    pub separation: bool,
    /// A latent-law slope was unidentifiable (single dropout stratum).
    pub slope_unidentified: bool,
    /// A transition row had no posterior mass and was reset to uniform.
    pub empty_transition_row: bool,
    /// The quasi-Newton polish gave up in its line search.
    pub newton_line_search_failed: bool,
}

impl FitFlags {
    fn merge(&mut self, other: FitFlags) {
        self.separation |= other.separation;
        self.slope_unidentified |= other.slope_unidentified;
        self.empty_transition_row |= other.empty_transition_row;
        self.newton_line_search_failed |= other.newton_line_search_failed;
    }
}

/// A converged (or capped) fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelKind,
    pub theta: ParameterSet,
    pub loglik: f64,
    /// Log-likelihood at each outer iteration, non-decreasing within 1e-8.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub posteriors: Posteriors,
    /// The fit sits on a low-occupancy (likely spurious) maximum.
    pub spurious_flag: bool,
    pub flags: FitFlags,
}

/// E-step: smoothed posteriors and the log-likelihood at θ.
pub fn e_step(data: &Dataset, theta: &ParameterSet) -> Result<(Posteriors, LogLikelihood)> {
    smoothed_posteriors(data, theta)
}

/// Aggregated posterior weights by dropout stratum.
///
/// `initial[s]` sums ξ_i1 over subjects with S_i = s; `transition[s][k]`
/// sums ζ_itk· over those subjects and all their transitions.
struct StratumWeights {
    strata: Vec<usize>,
    initial: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
}

fn stratum_weights(data: &Dataset, posteriors: &Posteriors, j_states: usize) -> StratumWeights {
    let mut strata: Vec<usize> = data.panels.iter().map(|p| p.dropout_time).collect();
    strata.sort_unstable();
    strata.dedup();
    let slot: std::collections::HashMap<usize, usize> =
        strata.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut initial = vec![vec![0.0; j_states]; strata.len()];
    let mut transition = vec![vec![vec![0.0; j_states]; j_states]; strata.len()];
    for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
        let idx = slot[&panel.dropout_time];
        for j in 0..j_states {
            initial[idx][j] += post.xi[0][j];
        }
        for zrow in &post.zeta {
            for k in 0..j_states {
                for j in 0..j_states {
                    transition[idx][k][j] += zrow[k * j_states + j];
                }
            }
        }
    }
    StratumWeights {
        strata,
        initial,
        transition,
    }
}

/// M-step for the parametric chain laws: one weighted multinomial logit for
/// the initial block and one per transition-origin state.
pub fn m_step_chain_parametric(
    data: &Dataset,
    posteriors: &Posteriors,
    current: &ChainParamsParametric,
    fit_slope: bool,
) -> Result<(ChainParamsParametric, FitFlags)> {
    let j_states = current.n_states();
    let weights = stratum_weights(data, posteriors, j_states);
    let mut flags = FitFlags::default();

    let init_obs: Vec<(f64, Vec<f64>)> = weights
        .strata
        .iter()
        .zip(&weights.initial)
        .map(|(&s, w)| (s as f64, w.clone()))
        .collect();
    let gamma_fit = fit_multilogit_in_s(&init_obs, &current.gamma, fit_slope)?;
    let mut flags_slope = gamma_fit.slope_frozen;

    let mut phi = Vec::with_capacity(j_states);
    for k in 0..j_states {
        let obs: Vec<(f64, Vec<f64>)> = weights
            .strata
            .iter()
            .zip(&weights.transition)
            .map(|(&s, t)| (s as f64, t[k].clone()))
            .collect();
        let fit = fit_multilogit_in_s(&obs, &current.phi[k], fit_slope)?;
        flags_slope |= fit.slope_frozen;
        phi.push(fit.logit);
    }
    flags.slope_unidentified = flags_slope;
    Ok((
        ChainParamsParametric {
            gamma: gamma_fit.logit,
            phi,
        },
        flags,
    ))
}

/// Closed-form M-step for the saturated chain laws: per-stratum weighted
/// frequencies for the initial vectors and row-normalized transition mass.
pub fn m_step_chain_saturated(
    data: &Dataset,
    posteriors: &Posteriors,
    current: &ChainParamsSaturated,
) -> Result<(ChainParamsSaturated, FitFlags)> {
    let j_states = current.n_states();
    let weights = stratum_weights(data, posteriors, j_states);
    let mut updated = current.clone();
    let mut flags = FitFlags::default();
    for (idx, &s) in weights.strata.iter().enumerate() {
        let n_t: f64 = weights.initial[idx].iter().sum();
        if n_t > 0.0 {
            updated.initial[s - 1] = weights.initial[idx].iter().map(|w| w / n_t).collect();
        }
        for k in 0..j_states {
            let mass: f64 = weights.transition[idx][k].iter().sum();
            if mass > 0.0 {
                updated.transition[s - 1][k] = weights.transition[idx][k]
                    .iter()
                    .map(|w| w / mass)
                    .collect();
            } else {
                updated.transition[s - 1][k] = vec![1.0 / j_states as f64; j_states];
                // Strata of length one have no transitions at all; only a
                // missing origin row within a transitioning stratum is
                // worth flagging.
                if s >= 2 {
                    flags.empty_transition_row = true;
                }
            }
        }
    }
    Ok((updated, flags))
}

/// M-step for the emission block; see [`fit_weighted_emission`].
pub fn m_step_emission(
    data: &Dataset,
    posteriors: &Posteriors,
    current: &EmissionParams,
) -> Result<(EmissionParams, FitFlags)> {
    let fit = fit_weighted_emission(data, posteriors, current)?;
    Ok((
        fit.params,
        FitFlags {
            separation: fit.separation,
            ..FitFlags::default()
        },
    ))
}

/// Expected complete-data log-likelihood of the latent block.
#[cfg(debug_assertions)]
fn q_latent(data: &Dataset, posteriors: &Posteriors, latent: &LatentParams) -> f64 {
    let template = ParameterSet {
        emission: EmissionParams::zeros(
            posteriors.subjects.first().map_or(1, |s| s.n_states()),
            0,
            0,
        ),
        latent: latent.clone(),
    };
    let laws_cache =
        crate::likelihood::laws_by_stratum(data, &template).expect("laws available during M-step");
    let mut q = 0.0;
    for (panel, post) in data.panels.iter().zip(&posteriors.subjects) {
        let laws = &laws_cache[&panel.dropout_time];
        let j_states = post.n_states();
        for (j, &w) in post.xi[0].iter().enumerate() {
            if w > 0.0 {
                q += w * laws.initial[j].ln();
            }
        }
        if matches!(latent, LatentParams::Markov(_)) {
            for zrow in &post.zeta {
                for k in 0..j_states {
                    for j in 0..j_states {
                        let w = zrow[k * j_states + j];
                        if w > 0.0 {
                            q += w * laws.transition[k][j].ln();
                        }
                    }
                }
            }
        }
    }
    q
}

/// One full M-step over the three blocks.
fn m_step(
    data: &Dataset,
    posteriors: &Posteriors,
    theta: &ParameterSet,
    chain_slope: bool,
) -> Result<(ParameterSet, FitFlags)> {
    let mut flags = FitFlags::default();
    let latent = match &theta.latent {
        LatentParams::Markov(ChainParams::Parametric(chain)) => {
            let (updated, f) = m_step_chain_parametric(data, posteriors, chain, chain_slope)?;
            flags.merge(f);
            LatentParams::Markov(ChainParams::Parametric(updated))
        }
        LatentParams::Markov(ChainParams::Saturated(chain)) => {
            let (updated, f) = m_step_chain_saturated(data, posteriors, chain)?;
            flags.merge(f);
            LatentParams::Markov(ChainParams::Saturated(updated))
        }
        LatentParams::TimeConstant(gamma) => {
            let j_states = gamma.n_states();
            let weights = stratum_weights(data, posteriors, j_states);
            let obs: Vec<(f64, Vec<f64>)> = weights
                .strata
                .iter()
                .zip(&weights.initial)
                .map(|(&s, w)| (s as f64, w.clone()))
                .collect();
            let fit = fit_multilogit_in_s(&obs, gamma, chain_slope)?;
            flags.slope_unidentified |= fit.slope_frozen;
            LatentParams::TimeConstant(fit.logit)
        }
    };
    #[cfg(debug_assertions)]
    {
        let before = q_latent(data, posteriors, &theta.latent);
        let after = q_latent(data, posteriors, &latent);
        debug_assert!(
            after >= before - 1e-8 * before.abs().max(1.0),
            "latent Q-block decreased: {before} -> {after}"
        );
    }
    let (emission, f) = m_step_emission(data, posteriors, &theta.emission)?;
    flags.merge(f);
    Ok((ParameterSet { emission, latent }, flags))
}

/// A single EM run from one starting point.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub theta: ParameterSet,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub posteriors: Posteriors,
    pub flags: FitFlags,
}

/// Iterate E- and M-steps until the relative log-likelihood change drops
/// below `tol` or `max_iter` is reached.
pub fn run_em(
    data: &Dataset,
    start: &ParameterSet,
    tol: f64,
    max_iter: usize,
    chain_slope: bool,
) -> Result<EmRun> {
    let mut theta = start.clone();
    let (mut posteriors, mut ll) = e_step(data, &theta)?;
    let mut trace = vec![ll.total];
    let mut flags = FitFlags::default();
    let mut converged = false;
    let mut n_iter = 0;
    for iter in 1..=max_iter {
        let (next, f) = m_step(data, &posteriors, &theta, chain_slope)?;
        flags.merge(f);
        let (next_post, next_ll) = e_step(data, &next)?;
        if next_ll.total < ll.total - 1e-8 {
            return Err(Error::MonotonicityViolation {
                iter,
                prev: ll.total,
                curr: next_ll.total,
            });
        }
        let rel = (next_ll.total - ll.total).abs() / ll.total.abs().max(1e-12);
        theta = next;
        posteriors = next_post;
        ll = next_ll;
        trace.push(ll.total);
        n_iter = iter;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        theta,
        loglik: ll.total,
        trace,
        converged,
        n_iter,
        posteriors,
        flags,
    })
}

/// Occupancy below `0.5 / J` for any state marks a candidate as a likely
/// spurious maximum.
pub fn is_spurious(occupancy: &[f64]) -> bool {
    let j_states = occupancy.len();
    if j_states < 2 {
        return false;
    }
    let floor = 0.5 / j_states as f64;
    occupancy.iter().any(|&o| o < floor)
}

/// One ranked short-run candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub theta: ParameterSet,
    pub loglik: f64,
    pub spurious: bool,
}

fn template_latent(config: &ModelConfig, kind: ModelKind, horizon: usize) -> LatentParams {
    match kind {
        ModelKind::M1Parametric => LatentParams::Markov(ChainParams::Parametric(
            ChainParamsParametric::uniform(config.n_states),
        )),
        ModelKind::M1Saturated => LatentParams::Markov(ChainParams::Saturated(
            ChainParamsSaturated::uniform(config.n_states, horizon),
        )),
        ModelKind::M2 => LatentParams::TimeConstant(MultiLogit::zeros(config.n_states)),
    }
}

/// Posteriors that put every observation wholly in a single state.
fn unit_posteriors(data: &Dataset) -> Posteriors {
    Posteriors {
        subjects: data
            .panels
            .iter()
            .map(|p| SubjectPosteriors {
                xi: vec![vec![1.0]; p.dropout_time],
                zeta: vec![vec![1.0]; p.dropout_time.saturating_sub(1)],
            })
            .collect(),
    }
}

/// Single-state logistic fit used to anchor the random starts.
fn base_logistic_fit(data: &Dataset, config: &ModelConfig) -> Result<EmissionParams> {
    let start = EmissionParams::zeros(1, config.p1(), config.p2());
    let fit = fit_weighted_emission(data, &unit_posteriors(data), &start)?;
    Ok(fit.params)
}

/// Random start: β at the single-state fit, state effects scattered around
/// the single-state effects with spread 2, latent laws uniform.
fn random_start(
    base: &EmissionParams,
    config: &ModelConfig,
    kind: ModelKind,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> ParameterSet {
    let u = (0..config.n_states)
        .map(|_| {
            base.u[0]
                .iter()
                .map(|&v| v + 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    ParameterSet {
        emission: EmissionParams {
            beta: base.beta.clone(),
            u,
        },
        latent: template_latent(config, kind, horizon),
    }
}

/// Short-run phase: many random starts run to a loose threshold, ranked by
/// log-likelihood with low-occupancy (spurious) candidates demoted.
pub fn short_run_init(
    data: &Dataset,
    config: &ModelConfig,
    em: &EmConfig,
    kind: ModelKind,
) -> Result<Vec<Candidate>> {
    em.validate()?;
    config.validate()?;
    let base = base_logistic_fit(data, config)?;
    let n_starts = if config.n_states == 1 {
        1
    } else {
        em.n_short_starts
    };
    let runs: Vec<Option<Candidate>> = (0..n_starts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(em.seed, r as u64));
            let start = random_start(&base, config, kind, data.horizon, &mut rng);
            run_em(data, &start, em.short_run_threshold, em.max_iter, em.chain_slope)
                .ok()
                .map(|run| Candidate {
                    spurious: is_spurious(&run.posteriors.state_occupancy()),
                    theta: run.theta,
                    loglik: run.loglik,
                })
        })
        .collect();
    let mut candidates: Vec<Candidate> = runs.into_iter().flatten().collect();
    if candidates.is_empty() {
        return Err(Error::AllStartsDegenerate);
    }
    candidates.sort_by(|a, b| {
        a.spurious
            .cmp(&b.spurious)
            .then(b.loglik.partial_cmp(&a.loglik).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(candidates)
}

/// Quasi-Newton polish from a converged-to-final-tolerance EM run. The
/// ascent can only raise the log-likelihood; a stalled line search leaves
/// the EM answer in place with a warning flag.
fn polish(data: &Dataset, em: &EmConfig, run: &mut EmRun, converged: &mut bool) -> Result<()> {
    let outcome = optim::refine_newton(data, &run.theta, em)?;
    run.flags.newton_line_search_failed |= outcome.line_search_failed;
    run.n_iter += outcome.n_iter;
    run.trace.extend(outcome.trace.into_iter().skip(1));
    run.theta = outcome.theta;
    *converged |= outcome.converged;
    let (post, ll) = e_step(data, &run.theta)?;
    run.posteriors = post;
    run.loglik = ll.total;
    Ok(())
}

fn finish(kind: ModelKind, run: EmRun, converged: bool) -> FitResult {
    let order = run.theta.intercept_order();
    let theta = run.theta.permute_states(&order);
    let posteriors = permute_posteriors(&run.posteriors, &order);
    let spurious_flag = is_spurious(&posteriors.state_occupancy());
    FitResult {
        model: kind,
        theta,
        loglik: run.loglik,
        loglik_trace: run.trace,
        converged,
        n_iter: run.n_iter,
        posteriors,
        spurious_flag,
        flags: run.flags,
    }
}

/// Full fitting protocol shared by every model kind.
fn fit_model(
    data: &Dataset,
    config: &ModelConfig,
    em: &EmConfig,
    kind: ModelKind,
) -> Result<FitResult> {
    let candidates = short_run_init(data, config, em, kind)?;
    let n_long = em.n_retained.min(candidates.len());
    let refine = em.refine_with_newton && kind != ModelKind::M1Saturated;

    let long_runs: Vec<Option<EmRun>> = candidates[..n_long]
        .par_iter()
        .map(|c| run_em(data, &c.theta, em.final_tol, em.max_iter, em.chain_slope).ok())
        .collect();
    let mut runs: Vec<EmRun> = long_runs.into_iter().flatten().collect();
    if runs.is_empty() {
        return Err(Error::AllStartsDegenerate);
    }
    // Best non-spurious run wins; fall back to the overall best.
    let pick = |rs: &[EmRun], allow_spurious: bool| -> Option<usize> {
        rs.iter()
            .enumerate()
            .filter(|(_, r)| allow_spurious || !is_spurious(&r.posteriors.state_occupancy()))
            .max_by(|(_, a), (_, b)| {
                a.loglik
                    .partial_cmp(&b.loglik)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i)
    };
    let best_idx = pick(&runs, false).or_else(|| pick(&runs, true)).unwrap();
    let mut best = runs.swap_remove(best_idx);

    let mut converged = best.converged;
    if refine {
        polish(data, em, &mut best, &mut converged)?;
    }
    Ok(finish(kind, best, converged))
}

fn permute_posteriors(posteriors: &Posteriors, perm: &[usize]) -> Posteriors {
    let j_states = perm.len();
    Posteriors {
        subjects: posteriors
            .subjects
            .iter()
            .map(|s| SubjectPosteriors {
                xi: s
                    .xi
                    .iter()
                    .map(|row| perm.iter().map(|&o| row[o]).collect())
                    .collect(),
                zeta: s
                    .zeta
                    .iter()
                    .map(|zrow| {
                        let mut out = vec![0.0; j_states * j_states];
                        for (k, &ko) in perm.iter().enumerate() {
                            for (j, &jo) in perm.iter().enumerate() {
                                out[k * j_states + j] = zrow[ko * j_states + jo];
                            }
                        }
                        out
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Fit the latent-Markov model M1 in the requested chain variant.
pub fn fit_em(
    data: &Dataset,
    config: &ModelConfig,
    em: &EmConfig,
    variant: ChainVariant,
) -> Result<FitResult> {
    let kind = match variant {
        ChainVariant::Parametric => ModelKind::M1Parametric,
        ChainVariant::Saturated => ModelKind::M1Saturated,
    };
    fit_model(data, config, em, kind)
}

/// Fit the time-constant discrete random-effects baseline M2.
pub fn fit_time_constant(data: &Dataset, config: &ModelConfig, em: &EmConfig) -> Result<FitResult> {
    fit_model(data, config, em, ModelKind::M2)
}

/// Single-start fit from a given θ (used by the bootstrap).
pub fn fit_from(data: &Dataset, start: &ParameterSet, em: &EmConfig) -> Result<FitResult> {
    em.validate()?;
    let kind = start.model_kind();
    let refine = em.refine_with_newton && kind != ModelKind::M1Saturated;
    let mut run = run_em(data, start, em.final_tol, em.max_iter, em.chain_slope)?;
    let mut converged = run.converged;
    if refine {
        polish(data, em, &mut run, &mut converged)?;
    }
    Ok(finish(kind, run, converged))
}
