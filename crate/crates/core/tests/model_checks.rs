//! Cross-module consistency checks: likelihood dominance at the generating
//! parameters, EM stationarity, reductions to ordinary logistic fits, the
//! mixture equivalence of the time-constant model, variant nesting, file
//! round-trips and bootstrap behavior.

use lmdrop::chain::{ChainParams, MultiLogit};
use lmdrop::config::ModelConfig;
use lmdrop::data::{load_dataset, write_dataset};
use lmdrop::em::{self, EmConfig};
use lmdrop::inference::{parametric_bootstrap, BootstrapOptions};
use lmdrop::likelihood::{conditional_loglik, score, sigmoid};
use lmdrop::params::{EmissionParams, LatentParams, ModelKind, ParameterSet};
use lmdrop::sim::{simulate_conditional, SchemeSpec};
use lmdrop::ChainVariant;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn scheme_config(n_states: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(n_states);
    cfg.fixed_columns = vec!["x".into()];
    cfg.random_intercept = true;
    cfg
}

#[test]
fn generating_parameters_dominate_unit_perturbations() {
    let spec = SchemeSpec::conditional(500, 10, 2024);
    let (data, _) = simulate_conditional(&spec);
    let truth = spec.generating_params();
    let base = conditional_loglik(&data, &truth).unwrap().total;
    let (_, flat) = truth.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut dominated = 0;
    for _ in 0..100 {
        let dir: Vec<f64> = (0..flat.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let perturbed: Vec<f64> = flat
            .iter()
            .zip(&dir)
            .map(|(v, d)| v + d / norm)
            .collect();
        let ll = conditional_loglik(&data, &truth.unflatten(&perturbed))
            .unwrap()
            .total;
        if ll <= base {
            dominated += 1;
        }
    }
    assert!(dominated >= 95, "dominated only {dominated}/100");
}

#[test]
fn em_fixed_point_has_vanishing_score() {
    let spec = SchemeSpec::conditional(60, 5, 77);
    let (data, _) = simulate_conditional(&spec);
    let run = em::run_em(&data, &spec.generating_params(), 1e-12, 8000, true).unwrap();
    let grad = score(&data, &run.theta).unwrap();
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm <= 1e-4, "score norm at EM fixed point: {norm}");
}

/// Plain IRLS logistic regression on (x, 1) rows; independent oracle.
fn reference_logistic(rows: &[(f64, u8)]) -> (f64, f64) {
    let mut beta = 0.0;
    let mut alpha = 0.0;
    for _ in 0..200 {
        let (mut g0, mut g1) = (0.0, 0.0);
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
        for &(x, y) in rows {
            let p = sigmoid(beta * x + alpha);
            let r = f64::from(y) - p;
            let w = p * (1.0 - p);
            g0 += r * x;
            g1 += r;
            h00 += w * x * x;
            h01 += w * x;
            h11 += w;
        }
        if g0.abs().max(g1.abs()) < 1e-12 {
            break;
        }
        let det = h00 * h11 - h01 * h01;
        beta += (h11 * g0 - h01 * g1) / det;
        alpha += (h00 * g1 - h01 * g0) / det;
    }
    (beta, alpha)
}

#[test]
fn single_state_fit_is_ordinary_logistic_regression() {
    let spec = SchemeSpec::conditional(120, 5, 31);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        seed: 5,
        ..EmConfig::default()
    };
    let fit = em::fit_em(&data, &scheme_config(1), &em_cfg, ChainVariant::Parametric).unwrap();
    let rows: Vec<(f64, u8)> = data
        .panels
        .iter()
        .flat_map(|p| (0..p.dropout_time).map(move |t| (p.x1[t][0], p.responses[t])))
        .collect();
    let (beta, alpha) = reference_logistic(&rows);
    assert!((fit.theta.emission.beta[0] - beta).abs() < 1e-5);
    assert!((fit.theta.emission.u[0][0] - alpha).abs() < 1e-5);

    let m2 = em::fit_time_constant(&data, &scheme_config(1), &em_cfg).unwrap();
    assert!((m2.theta.emission.beta[0] - beta).abs() < 1e-5);
    assert!((m2.theta.emission.u[0][0] - alpha).abs() < 1e-5);
}

#[test]
fn latent_markov_fit_recovers_the_fixed_effect() {
    let spec = SchemeSpec::conditional(500, 10, 4242);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        n_short_starts: 10,
        seed: 9,
        ..EmConfig::default()
    };
    let fit = em::fit_em(&data, &scheme_config(2), &em_cfg, ChainVariant::Parametric).unwrap();
    assert!(fit.converged);
    // Within bias + 3 sd of the replication benchmark for this design.
    let band = 0.0071 + 3.0 * 0.0405;
    assert!(
        (fit.theta.emission.beta[0] - 0.5).abs() <= band,
        "beta = {}",
        fit.theta.emission.beta[0]
    );
    // States come back sorted by intercept: near -1.5 then near 1.0.
    assert!(fit.theta.emission.u[0][0] < fit.theta.emission.u[1][0]);
}

#[test]
fn time_constant_fit_underestimates_the_fixed_effect() {
    let spec = SchemeSpec::conditional(500, 10, 4243);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        n_short_starts: 10,
        seed: 11,
        ..EmConfig::default()
    };
    let m2 = em::fit_time_constant(&data, &scheme_config(2), &em_cfg).unwrap();
    let beta = m2.theta.emission.beta[0];
    // The time-constant baseline is persistently biased low on this design.
    assert!(beta < 0.48, "beta = {beta}");
    assert!(beta > 0.25, "beta = {beta}");
}

/// Independent 2-component logistic mixture EM with free class weights.
fn reference_mixture(
    data: &lmdrop::Dataset,
    mut pi1: f64,
    mut beta: f64,
    mut u: [f64; 2],
) -> (f64, f64, [f64; 2], f64) {
    let n = data.n_subjects();
    let mut loglik = f64::NEG_INFINITY;
    for _ in 0..5000 {
        // E-step in log space.
        let mut w = vec![0.0; n];
        let mut new_loglik = 0.0;
        for (i, p) in data.panels.iter().enumerate() {
            let mut lp = [pi1.ln(), (1.0 - pi1).ln()];
            for t in 0..p.dropout_time {
                for (j, lpj) in lp.iter_mut().enumerate() {
                    let eta = beta * p.x1[t][0] + u[j];
                    let pr = sigmoid(if p.responses[t] == 1 { eta } else { -eta });
                    *lpj += pr.ln();
                }
            }
            let m = lp[0].max(lp[1]);
            let z = (lp[0] - m).exp() + (lp[1] - m).exp();
            w[i] = (lp[0] - m).exp() / z;
            new_loglik += m + z.ln();
        }
        // M-step: class weight and weighted logistic by Newton.
        pi1 = w.iter().sum::<f64>() / n as f64;
        for _ in 0..50 {
            let mut g = [0.0; 3];
            let mut h = [[0.0; 3]; 3];
            for (i, p) in data.panels.iter().enumerate() {
                for t in 0..p.dropout_time {
                    for (j, &wj) in [w[i], 1.0 - w[i]].iter().enumerate() {
                        let x = p.x1[t][0];
                        let eta = beta * x + u[j];
                        let pr = sigmoid(eta);
                        let r = wj * (f64::from(p.responses[t]) - pr);
                        let v = wj * pr * (1.0 - pr);
                        let design = [x, f64::from(j == 0), f64::from(j == 1)];
                        for a in 0..3 {
                            g[a] += r * design[a];
                            for b in 0..3 {
                                h[a][b] += v * design[a] * design[b];
                            }
                        }
                    }
                }
            }
            if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-8 {
                break;
            }
            // Solve the 3x3 system by Gaussian elimination.
            let mut m = [[0.0; 4]; 3];
            for a in 0..3 {
                m[a][..3].copy_from_slice(&h[a]);
                m[a][3] = g[a];
            }
            for c in 0..3 {
                let pivot = (c..3).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
                m.swap(c, pivot);
                for r in c + 1..3 {
                    let f = m[r][c] / m[c][c];
                    for cc in c..4 {
                        m[r][cc] -= f * m[c][cc];
                    }
                }
            }
            let mut d = [0.0; 3];
            for c in (0..3).rev() {
                let mut acc = m[c][3];
                for cc in c + 1..3 {
                    acc -= m[c][cc] * d[cc];
                }
                d[c] = acc / m[c][c];
            }
            beta += d[0];
            u[0] += d[1];
            u[1] += d[2];
        }
        if (new_loglik - loglik).abs() / loglik.abs().max(1e-12) < 1e-11 {
            loglik = new_loglik;
            break;
        }
        loglik = new_loglik;
    }
    (pi1, beta, u, loglik)
}

#[test]
fn time_constant_model_with_pinned_slope_is_a_plain_mixture() {
    let spec = SchemeSpec::conditional(150, 5, 303);
    let (data, _) = simulate_conditional(&spec);
    let start = ParameterSet {
        emission: EmissionParams {
            beta: vec![0.3],
            u: vec![vec![0.8], vec![-1.0]],
        },
        latent: LatentParams::TimeConstant(MultiLogit {
            coef: vec![[0.2, 0.0]],
        }),
    };
    let run = em::run_em(&data, &start, 1e-11, 5000, false).unwrap();

    let pi1_start = sigmoid(0.2);
    let (pi1, beta, u, loglik) = reference_mixture(&data, pi1_start, 0.3, [0.8, -1.0]);
    assert!(
        (run.loglik - loglik).abs() <= 1e-4,
        "loglik {} vs {loglik}",
        run.loglik
    );
    assert!((run.theta.emission.beta[0] - beta).abs() <= 1e-4);
    assert!((run.theta.emission.u[0][0] - u[0]).abs() <= 1e-4);
    assert!((run.theta.emission.u[1][0] - u[1]).abs() <= 1e-4);
    let LatentParams::TimeConstant(gamma) = &run.theta.latent else {
        panic!("wrong latent kind")
    };
    assert!((gamma.probs(3.0)[0] - pi1).abs() <= 1e-4);
    // The slope stayed pinned.
    assert_eq!(gamma.coef[0][1], 0.0);
}

#[test]
fn saturated_variant_never_fits_worse_than_parametric() {
    // With few strata the optimization is reliable and the per-stratum
    // tables nest every logit-in-s law.
    for seed in [1u64, 2, 3] {
        let spec = SchemeSpec::conditional(120, 3, 1000 + seed);
        let (data, _) = simulate_conditional(&spec);
        let em_cfg = EmConfig {
            n_short_starts: 8,
            seed,
            ..EmConfig::default()
        };
        let par = em::fit_em(&data, &scheme_config(2), &em_cfg, ChainVariant::Parametric).unwrap();
        let sat = em::fit_em(&data, &scheme_config(2), &em_cfg, ChainVariant::Saturated).unwrap();
        assert!(
            sat.loglik >= par.loglik - 1e-6,
            "seed {seed}: saturated {} < parametric {}",
            sat.loglik,
            par.loglik
        );
    }
}

#[test]
fn simulated_dataset_round_trips_through_files() {
    let spec = SchemeSpec::conditional(40, 5, 606);
    let (data, _) = simulate_conditional(&spec);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_dataset(&data, &path).unwrap();
    let mut cfg = scheme_config(2);
    cfg.horizon = Some(5);
    let again = load_dataset(&path, &cfg).unwrap();
    assert_eq!(data, again);
}

#[test]
fn retained_candidates_capture_the_multistart_optimum() {
    // The protocol long-runs the ten best-ranked short runs; their best
    // fit should match the best over all thirty starts.
    let spec = SchemeSpec::conditional(500, 10, 808);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        n_short_starts: 30,
        seed: 21,
        ..EmConfig::default()
    };
    let candidates =
        em::short_run_init(&data, &scheme_config(2), &em_cfg, ModelKind::M1Parametric).unwrap();
    let runs: Vec<f64> = candidates
        .iter()
        .map(|c| {
            em::run_em(&data, &c.theta, 1e-5, 1000, true)
                .map(|r| r.loglik)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let best = runs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best_retained = runs[..10].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best - best_retained <= 1e-3 * best.abs().max(1.0),
        "retained best {best_retained} vs overall best {best}"
    );
}

#[test]
fn bootstrap_is_deterministic_and_calibrated() {
    let spec = SchemeSpec::conditional(500, 10, 909);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        n_short_starts: 5,
        n_retained: 3,
        seed: 13,
        ..EmConfig::default()
    };
    let fit = em::fit_em(&data, &scheme_config(2), &em_cfg, ChainVariant::Parametric).unwrap();
    assert!(fit.converged);
    let em_boot = EmConfig {
        seed: 13,
        ..EmConfig::default()
    };
    // Determinism on a small replicate budget.
    let small = BootstrapOptions {
        n_replicates: 6,
        seed: 77,
        em: em_boot.clone(),
        ..BootstrapOptions::default()
    };
    let a = parametric_bootstrap(&data, &fit.theta, &small).unwrap();
    let b = parametric_bootstrap(&data, &fit.theta, &small).unwrap();
    assert_eq!(a.replicate_estimates, b.replicate_estimates);
    assert_eq!(a.se, b.se);
    assert_eq!(a.n_failed, b.n_failed);

    let options = BootstrapOptions {
        n_replicates: 100,
        seed: 77,
        em: em_boot,
        ..BootstrapOptions::default()
    };
    let a = parametric_bootstrap(&data, &fit.theta, &options).unwrap();

    // The fixed-effect SE should sit near the Monte Carlo spread of the
    // replication benchmark for this design (0.0405), within 50%.
    let beta_idx = a
        .parameter_names
        .iter()
        .position(|n| n == "beta.0")
        .unwrap();
    let se = a.se[beta_idx];
    assert!(
        (se - 0.0405).abs() <= 0.5 * 0.0405,
        "bootstrap se = {se}, wanted within 50% of 0.0405"
    );
    assert!(!a.warn_high_failure, "{} failures", a.n_failed);
}

#[test]
fn m1_chain_structure_is_recovered_near_truth() {
    // Chain-law probabilities at the fit should track the generating laws
    // stratum by stratum.
    let spec = SchemeSpec::conditional(800, 10, 515);
    let (data, _) = simulate_conditional(&spec);
    let em_cfg = EmConfig {
        n_short_starts: 5,
        n_retained: 5,
        seed: 3,
        ..EmConfig::default()
    };
    let fit = em::fit_em(&data, &scheme_config(2), &em_cfg, ChainVariant::Parametric).unwrap();
    let LatentParams::Markov(ChainParams::Parametric(chain)) = &fit.theta.latent else {
        panic!("wrong latent kind")
    };
    // Fitted states are sorted ascending by intercept, so generating state 1
    // (intercept 1.0) is fitted state 2; flip the law indices accordingly.
    let truth = &spec.chain;
    for s in [2usize, 5, 8] {
        let p_fit = chain.initial_probs(s);
        let p_true = truth.initial_probs(s);
        assert!(
            (p_fit[1] - p_true[0]).abs() < 0.1,
            "s={s}: {} vs {}",
            p_fit[1],
            p_true[0]
        );
    }
}
