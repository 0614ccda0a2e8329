//! Model selection criteria, classification diagnostics, local decoding and
//! the parametric bootstrap.

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::em::{fit_from, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::likelihood::{sigmoid, Posteriors};
use crate::params::{ModelKind, ParameterSet};
use crate::{derive_seed, likelihood};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Number of free parameters of a model at the given design dimensions.
///
/// Emission always contributes p1 + J·p2. The latent block adds 2(J-1) for
/// the initial logit, 2J(J-1) more for the parametric transition logits, or
/// T(J-1) + T·J(J-1) for the saturated per-stratum tables.
pub fn param_count(kind: ModelKind, n_states: usize, p1: usize, p2: usize, horizon: usize) -> usize {
    let j = n_states;
    let emission = p1 + j * p2;
    match kind {
        ModelKind::M1Parametric => emission + 2 * (j - 1) + 2 * j * (j - 1),
        ModelKind::M1Saturated => emission + horizon * (j - 1) + horizon * j * (j - 1),
        ModelKind::M2 => emission + 2 * (j - 1),
    }
}

/// One row of the model-selection table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriteriaRow {
    pub loglik: f64,
    pub k: usize,
    pub n: usize,
    pub aic: f64,
    pub aic3: f64,
    /// NaN when n <= k + 1.
    pub aicc: f64,
    /// NaN when n <= k + 1.
    pub aicu: f64,
    pub bic: f64,
}

impl CriteriaRow {
    /// Compute every criterion; the small-sample corrections come out NaN
    /// when their denominator n - k - 1 is not positive.
    pub fn new(loglik: f64, k: usize, n: usize) -> CriteriaRow {
        let kf = k as f64;
        let nf = n as f64;
        let aic = -2.0 * loglik + 2.0 * kf;
        let aic3 = -2.0 * loglik + 3.0 * kf;
        let (aicc, aicu) = if n > k + 1 {
            let denom = nf - kf - 1.0;
            let aicc = aic + 2.0 * kf * (kf + 1.0) / denom;
            (aicc, aicc + nf * (nf / denom).ln())
        } else {
            (f64::NAN, f64::NAN)
        };
        CriteriaRow {
            loglik,
            k,
            n,
            aic,
            aic3,
            aicc,
            aicu,
            bic: -2.0 * loglik + kf * nf.ln(),
        }
    }
}

/// Strict form of [`CriteriaRow::new`]: the small-sample criteria must be
/// defined, i.e. n > k + 1.
pub fn information_criteria(loglik: f64, k: usize, n: usize) -> Result<CriteriaRow> {
    if n <= k + 1 {
        return Err(Error::CriteriaUndefined { n, k });
    }
    Ok(CriteriaRow::new(loglik, k, n))
}

/// Classification sharpness H ∈ [0, 1]: average excess of the posterior
/// maximum over 1/J, rescaled so certain classification scores 1.
pub fn classification_index_h(posteriors: &Posteriors, n_states: usize) -> Result<f64> {
    if n_states < 2 {
        return Err(Error::SingleStateH);
    }
    let jf = n_states as f64;
    let mut numer = 0.0;
    let mut total_obs = 0.0;
    for subject in &posteriors.subjects {
        for row in &subject.xi {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            numer += max - 1.0 / jf;
            total_obs += 1.0;
        }
    }
    Ok(numer / ((1.0 - 1.0 / jf) * total_obs))
}

/// Local decoding output: per-subject most likely state at every occasion.
#[derive(Debug, Clone)]
pub struct DecodedStates {
    /// 0-based state indices, one sequence per subject.
    pub states: Vec<Vec<usize>>,
    /// Occasions whose posterior row had a tied maximum (broken toward the
    /// lowest index).
    pub ties: Vec<Vec<bool>>,
}

impl DecodedStates {
    pub fn any_tie(&self) -> bool {
        self.ties.iter().any(|row| row.iter().any(|&t| t))
    }
}

/// Per-occasion argmax of the smoothed posteriors.
pub fn local_decode(posteriors: &Posteriors) -> DecodedStates {
    let mut states = Vec::with_capacity(posteriors.subjects.len());
    let mut ties = Vec::with_capacity(posteriors.subjects.len());
    for subject in &posteriors.subjects {
        let mut seq = Vec::with_capacity(subject.xi.len());
        let mut tie_row = Vec::with_capacity(subject.xi.len());
        for row in &subject.xi {
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            let tied = row
                .iter()
                .enumerate()
                .any(|(j, &p)| j != best && p == row[best]);
            seq.push(best);
            tie_row.push(tied);
        }
        states.push(seq);
        ties.push(tie_row);
    }
    DecodedStates { states, ties }
}

/// Count decoded states at the last observed occasion, cross-classified by
/// dropout time: entry `[j][t - 1]` counts subjects with S = t decoded into
/// state j + 1 at time S.
pub fn decode_at_attrition(
    data: &Dataset,
    decoded: &DecodedStates,
    n_states: usize,
) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; data.horizon]; n_states];
    for (panel, seq) in data.panels.iter().zip(&decoded.states) {
        let last = seq[panel.dropout_time - 1];
        table[last][panel.dropout_time - 1] += 1;
    }
    table
}

/// Mean smoothed state probabilities by occasion, over the subjects still
/// observed at that occasion. Rows are probability vectors.
///
/// The table ends at the last occasion with any subject still in; with the
/// default horizon (max observed time) that is exactly T rows.
pub fn average_state_probs(data: &Dataset, posteriors: &Posteriors, n_states: usize) -> Vec<Vec<f64>> {
    let max_len = data
        .panels
        .iter()
        .map(|p| p.dropout_time)
        .max()
        .unwrap_or(0);
    let mut table = vec![vec![0.0; n_states]; max_len];
    let mut counts = vec![0.0; max_len];
    for post in &posteriors.subjects {
        for (t, row) in post.xi.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                table[t][j] += p;
            }
            counts[t] += 1.0;
        }
    }
    for (row, &c) in table.iter_mut().zip(&counts) {
        for v in row.iter_mut() {
            *v /= c;
        }
    }
    table
}

/// Options for the parametric bootstrap.
#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    /// Number of replicates (the headline default is 200).
    pub n_replicates: usize,
    pub seed: u64,
    /// Redraw each replicate's dropout times from their empirical
    /// distribution instead of conditioning on the observed ones.
    pub resample_dropout: bool,
    /// EM settings for the single-start refits.
    pub em: EmConfig,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            n_replicates: 200,
            seed: 0,
            resample_dropout: false,
            em: EmConfig::default(),
        }
    }
}

/// Per-parameter standard errors from refitting simulated replicates.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub n_replicates: usize,
    pub n_failed: usize,
    pub parameter_names: Vec<String>,
    /// Sample standard deviation of each parameter over successful refits.
    pub se: Vec<f64>,
    /// Successful refits, one flattened parameter vector per row.
    pub replicate_estimates: Vec<Vec<f64>>,
    /// More than a quarter of the replicates failed to converge.
    pub warn_high_failure: bool,
}

/// Simulate one bootstrap replicate: keep every subject's covariates and
/// dropout time, redraw the latent structure and the responses from θ̂.
fn simulate_replicate(
    data: &Dataset,
    theta: &ParameterSet,
    rng: &mut ChaCha8Rng,
    resample_dropout: bool,
) -> Result<Dataset> {
    let mut replicate = data.clone();
    let dropout_pool: Vec<usize> = data.panels.iter().map(|p| p.dropout_time).collect();
    for panel in replicate.panels.iter_mut() {
        if resample_dropout {
            let s = dropout_pool[rng.random_range(0..dropout_pool.len())];
            panel.dropout_time = s;
            // Covariate rows are recycled cyclically when the redrawn
            // dropout time exceeds the observed sequence.
            let recycle = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..s).map(|t| rows[t % rows.len()].clone()).collect()
            };
            panel.x1 = recycle(&panel.x1);
            panel.x2 = recycle(&panel.x2);
            panel.responses = vec![0; s];
        }
        let laws = likelihood::subject_laws(theta, panel.dropout_time)?;
        let mut state = sample_from(rng, &laws.initial);
        for t in 0..panel.dropout_time {
            if t > 0 {
                state = sample_from(rng, &laws.transition[state]);
            }
            let p = likelihood::success_prob(&panel.x1[t], &panel.x2[t], &theta.emission, state);
            panel.responses[t] = u8::from(rng.random::<f64>() < p);
        }
    }
    Ok(replicate)
}

fn sample_from(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut r: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        r -= p;
        if r <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Parametric bootstrap standard errors around a converged fit.
///
/// Each replicate holds the observed dropout times and covariates fixed,
/// simulates the latent chain and responses at θ̂, refits from θ̂ with a
/// single start, and reorders states by intercept before the estimates are
/// pooled. Replicates that fail to converge are dropped and counted.
pub fn parametric_bootstrap(
    data: &Dataset,
    theta: &ParameterSet,
    options: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if options.n_replicates == 0 {
        return Err(Error::EmptyBootstrap);
    }
    let (parameter_names, _) = theta.flatten();
    let refits: Vec<Option<Vec<f64>>> = (0..options.n_replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, b as u64));
            let replicate = simulate_replicate(data, theta, &mut rng, options.resample_dropout).ok()?;
            let fit = fit_from(&replicate, theta, &options.em).ok()?;
            if !fit.converged {
                return None;
            }
            // fit_from already reports states in intercept order.
            Some(fit.theta.flatten().1)
        })
        .collect();

    let replicate_estimates: Vec<Vec<f64>> = refits.into_iter().flatten().collect();
    let n_ok = replicate_estimates.len();
    let n_failed = options.n_replicates - n_ok;
    let dim = parameter_names.len();
    let mut se = vec![f64::NAN; dim];
    if n_ok >= 2 {
        for d in 0..dim {
            let mean: f64 = replicate_estimates.iter().map(|r| r[d]).sum::<f64>() / n_ok as f64;
            let ss: f64 = replicate_estimates
                .iter()
                .map(|r| (r[d] - mean).powi(2))
                .sum();
            se[d] = (ss / (n_ok as f64 - 1.0)).sqrt();
        }
    }
    Ok(BootstrapResult {
        n_replicates: options.n_replicates,
        n_failed,
        parameter_names,
        se,
        replicate_estimates,
        warn_high_failure: n_failed * 4 > options.n_replicates,
    })
}

/// Criteria table rows for a range of state counts, for any mix of models.
pub fn selection_table(
    data: &Dataset,
    base_config: &ModelConfig,
    em: &EmConfig,
    kinds: &[ModelKind],
    j_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<(ModelKind, usize, CriteriaRow, FitResult)>> {
    let mut rows = Vec::new();
    for kind in kinds {
        for j in j_range.clone() {
            let mut config = base_config.clone();
            config.n_states = j;
            let fit = match kind {
                ModelKind::M1Parametric => {
                    crate::em::fit_em(data, &config, em, crate::ChainVariant::Parametric)?
                }
                ModelKind::M1Saturated => {
                    crate::em::fit_em(data, &config, em, crate::ChainVariant::Saturated)?
                }
                ModelKind::M2 => crate::em::fit_time_constant(data, &config, em)?,
            };
            let k = param_count(*kind, j, config.p1(), config.p2(), data.horizon);
            let row = CriteriaRow::new(fit.loglik, k, data.n_subjects());
            rows.push((*kind, j, row, fit));
        }
    }
    Ok(rows)
}

/// The success-probability link used by the emission model; re-exported for
/// table construction in the CLI.
pub fn inverse_logit(eta: f64) -> f64 {
    sigmoid(eta)
}
