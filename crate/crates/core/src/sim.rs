//! Synthetic panel generators with informative dropout, and the replication
//! driver that benchmarks the fitters against known generating values.
//!
//! Two schemes are provided. The *conditional* scheme draws the dropout time
//! first (uniform on 1..=T) and then runs a chain whose laws depend on it.
//! The *joint* scheme runs a homogeneous chain and lets each occasion's
//! state drive a dropout hazard; the subject is observed through the
//! occasion at which dropout fires.

use crate::chain::{ChainParams, ChainParamsParametric, MultiLogit};
use crate::config::ModelConfig;
use crate::data::{Dataset, SubjectPanel};
use crate::em::{fit_em, fit_time_constant, EmConfig};
use crate::error::{Error, Result};
use crate::likelihood::sigmoid;
use crate::params::{EmissionParams, LatentParams, ModelKind, ParameterSet};
use crate::{derive_seed, ChainVariant};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Which generator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Conditional,
    Joint,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Conditional => "conditional",
            Scheme::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(Scheme::Conditional),
            "joint" => Ok(Scheme::Joint),
            other => Err(Error::InvalidConfig(format!(
                "unknown scheme `{other}` (expected `conditional` or `joint`)"
            ))),
        }
    }
}

/// Complete description of one simulated design.
#[derive(Debug, Clone)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    pub n_subjects: usize,
    pub horizon: usize,
    /// Fixed effect on the standard-normal covariate.
    pub beta: f64,
    /// State intercepts u_1..u_J.
    pub intercepts: Vec<f64>,
    /// Conditional scheme: chain laws as logits in the dropout time.
    pub chain: ChainParamsParametric,
    /// Joint scheme: homogeneous initial distribution.
    pub initial: Vec<f64>,
    /// Joint scheme: homogeneous transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Joint scheme: per-state dropout logits.
    pub dropout_logits: Vec<f64>,
    pub seed: u64,
}

impl SchemeSpec {
    /// The defaults of the conditional design: a two-state chain strongly
    /// tied to the dropout time.
    pub fn conditional(n_subjects: usize, horizon: usize, seed: u64) -> Self {
        SchemeSpec {
            scheme: Scheme::Conditional,
            n_subjects,
            horizon,
            beta: 0.5,
            intercepts: vec![1.0, -1.5],
            chain: ChainParamsParametric {
                gamma: MultiLogit {
                    coef: vec![[2.0, -0.5]],
                },
                phi: vec![
                    MultiLogit {
                        coef: vec![[5.0, -1.5]],
                    },
                    MultiLogit {
                        coef: vec![[5.0, -0.75]],
                    },
                ],
            },
            initial: vec![0.6, 0.4],
            transition: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            dropout_logits: vec![-3.0, -1.5],
            seed,
        }
    }

    /// The defaults of the joint design: a homogeneous two-state chain with
    /// state-specific dropout hazards.
    pub fn joint(n_subjects: usize, horizon: usize, seed: u64) -> Self {
        SchemeSpec {
            scheme: Scheme::Joint,
            ..Self::conditional(n_subjects, horizon, seed)
        }
    }

    pub fn n_states(&self) -> usize {
        self.intercepts.len()
    }

    /// The generating parameter set in fit-ready form (conditional scheme).
    pub fn generating_params(&self) -> ParameterSet {
        ParameterSet {
            emission: EmissionParams {
                beta: vec![self.beta],
                u: self.intercepts.iter().map(|&v| vec![v]).collect(),
            },
            latent: LatentParams::Markov(ChainParams::Parametric(self.chain.clone())),
        }
    }

    /// The model configuration matching the generated files.
    pub fn model_config(&self, n_states: usize, variant: ChainVariant) -> ModelConfig {
        ModelConfig {
            n_states,
            chain_variant: variant,
            fixed_columns: vec!["x".into()],
            state_columns: vec![],
            random_intercept: true,
            horizon: Some(self.horizon),
        }
    }
}

/// One subject's generated ground truth: its latent path (1-based states)
/// and, for the joint scheme, whether dropout actually fired.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPath {
    pub subject_id: String,
    pub states: Vec<usize>,
    pub dropped: bool,
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut r: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        r -= p;
        if r <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

fn empty_dataset(spec: &SchemeSpec) -> Dataset {
    Dataset {
        panels: Vec::new(),
        horizon: spec.horizon,
        p1: 1,
        p2: 1,
        fixed_names: vec!["x".into()],
        state_names: vec![],
        random_intercept: true,
    }
}

fn subject_id(i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("s{:0width$}", i + 1)
}

/// Conditional scheme: dropout time uniform on 1..=T, then a
/// dropout-conditional chain and Bernoulli-logit responses.
pub fn simulate_conditional(spec: &SchemeSpec) -> (Dataset, Vec<TruthPath>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = empty_dataset(spec);
    let mut truths = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let s_len = rng.random_range(1..=spec.horizon);
        let initial = spec.chain.initial_probs(s_len);
        let transition = spec.chain.transition_matrix(s_len);
        let mut state = sample_index(&mut rng, &initial);
        let mut states = Vec::with_capacity(s_len);
        let mut responses = Vec::with_capacity(s_len);
        let mut x1 = Vec::with_capacity(s_len);
        for t in 0..s_len {
            if t > 0 {
                state = sample_index(&mut rng, &transition[state]);
            }
            states.push(state + 1);
            let x: f64 = rng.sample(StandardNormal);
            let p = sigmoid(spec.beta * x + spec.intercepts[state]);
            responses.push(u8::from(rng.random::<f64>() < p));
            x1.push(vec![x]);
        }
        let id = subject_id(i, spec.n_subjects);
        data.panels.push(SubjectPanel {
            subject_id: id.clone(),
            responses,
            x1,
            x2: vec![vec![1.0]; s_len],
            dropout_time: s_len,
        });
        truths.push(TruthPath {
            subject_id: id,
            states,
            dropped: s_len < spec.horizon,
        });
    }
    (data, truths)
}

/// Joint scheme: homogeneous chain, state-driven dropout hazard, responses
/// observed through the occasion at which dropout fires (or T).
pub fn simulate_joint(spec: &SchemeSpec) -> (Dataset, Vec<TruthPath>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hazards: Vec<f64> = spec.dropout_logits.iter().map(|&l| sigmoid(l)).collect();
    let mut data = empty_dataset(spec);
    let mut truths = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let mut state = sample_index(&mut rng, &spec.initial);
        let mut states = Vec::new();
        let mut responses = Vec::new();
        let mut x1 = Vec::new();
        let mut dropped = false;
        for t in 0..spec.horizon {
            if t > 0 {
                state = sample_index(&mut rng, &spec.transition[state]);
            }
            states.push(state + 1);
            let x: f64 = rng.sample(StandardNormal);
            let p = sigmoid(spec.beta * x + spec.intercepts[state]);
            responses.push(u8::from(rng.random::<f64>() < p));
            x1.push(vec![x]);
            if rng.random::<f64>() < hazards[state] {
                dropped = true;
                break;
            }
        }
        let s_len = states.len();
        let id = subject_id(i, spec.n_subjects);
        data.panels.push(SubjectPanel {
            subject_id: id.clone(),
            responses,
            x1,
            x2: vec![vec![1.0]; s_len],
            dropout_time: s_len,
        });
        truths.push(TruthPath {
            subject_id: id,
            states,
            dropped,
        });
    }
    (data, truths)
}

/// Dispatch on the spec's scheme.
pub fn simulate(spec: &SchemeSpec) -> (Dataset, Vec<TruthPath>) {
    match spec.scheme {
        Scheme::Conditional => simulate_conditional(spec),
        Scheme::Joint => simulate_joint(spec),
    }
}

/// Accuracy of one model's fixed-effect estimate over the replicates.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub model: ModelKind,
    pub bias: f64,
    /// Spread of the estimates around their mean (population form, so that
    /// MSE = bias² + std_dev² holds exactly as computed).
    pub std_dev: f64,
    pub mse: f64,
    pub n_used: usize,
    pub n_failed: usize,
}

/// Bias / spread / MSE of the fixed effect for each fitted model.
#[derive(Debug, Clone)]
pub struct ReplicationReport {
    pub scheme: Scheme,
    pub n_subjects: usize,
    pub horizon: usize,
    pub n_reps: usize,
    pub models: Vec<ModelReport>,
    /// More than 20% of the fits failed somewhere; estimates are suspect.
    pub invalid: bool,
}

/// Fit settings used inside the replication loop: a lighter multi-start
/// protocol than the default, sized for repeated desk-scale fits.
pub fn replication_em_config(seed: u64) -> EmConfig {
    EmConfig {
        n_short_starts: 5,
        n_retained: 5,
        seed,
        ..EmConfig::default()
    }
}

/// Generate `n_reps` datasets from `spec` and fit the requested models on
/// each, reporting bias, spread and MSE of the fixed-effect estimate.
pub fn run_replications(
    spec: &SchemeSpec,
    n_reps: usize,
    models: &[ModelKind],
) -> Result<ReplicationReport> {
    if n_reps < 2 {
        return Err(Error::InvalidConfig("need at least 2 replicates".into()));
    }
    let estimates: Vec<Vec<Option<f64>>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rep_spec = spec.clone();
            rep_spec.seed = derive_seed(spec.seed, rep as u64);
            let (data, _) = simulate(&rep_spec);
            let em = replication_em_config(derive_seed(rep_spec.seed, 0xF17));
            models
                .iter()
                .map(|kind| {
                    let config = spec.model_config(spec.n_states(), ChainVariant::Parametric);
                    let fit = match kind {
                        ModelKind::M1Parametric => {
                            fit_em(&data, &config, &em, ChainVariant::Parametric)
                        }
                        ModelKind::M1Saturated => {
                            fit_em(&data, &config, &em, ChainVariant::Saturated)
                        }
                        ModelKind::M2 => fit_time_constant(&data, &config, &em),
                    };
                    match fit {
                        Ok(f) if f.converged => Some(f.theta.emission.beta[0]),
                        _ => None,
                    }
                })
                .collect()
        })
        .collect();

    let mut reports = Vec::with_capacity(models.len());
    let mut invalid = false;
    for (m, &kind) in models.iter().enumerate() {
        let beta_hats: Vec<f64> = estimates.iter().filter_map(|row| row[m]).collect();
        let n_used = beta_hats.len();
        let n_failed = n_reps - n_used;
        if n_failed * 5 > n_reps {
            invalid = true;
        }
        let mean = beta_hats.iter().sum::<f64>() / n_used.max(1) as f64;
        let bias = mean - spec.beta;
        let var =
            beta_hats.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n_used.max(1) as f64;
        let mse = beta_hats
            .iter()
            .map(|b| (b - spec.beta).powi(2))
            .sum::<f64>()
            / n_used.max(1) as f64;
        reports.push(ModelReport {
            model: kind,
            bias,
            std_dev: var.sqrt(),
            mse,
            n_used,
            n_failed,
        });
    }
    Ok(ReplicationReport {
        scheme: spec.scheme,
        n_subjects: spec.n_subjects,
        horizon: spec.horizon,
        n_reps,
        models: reports,
        invalid,
    })
}
