use lmdrop::em::{self, EmConfig};
use lmdrop::glm::fit_weighted_emission;
use lmdrop::params::ModelKind;
use lmdrop::sim::{simulate_conditional, SchemeSpec};
use std::time::Instant;

#[test]
fn probe_inner() {
    let spec = SchemeSpec::conditional(500, 10, 123);
    let (data, _) = simulate_conditional(&spec);
    let config = spec.model_config(2, lmdrop::ChainVariant::Parametric);
    let em_cfg = EmConfig { n_short_starts: 5, n_retained: 5, seed: 42, ..EmConfig::default() };
    let cands = em::short_run_init(&data, &config, &em_cfg, ModelKind::M1Parametric).unwrap();
    let theta = cands[0].theta.clone();

    // Time an e_step alone.
    let t0 = Instant::now();
    let mut posteriors = None;
    for _ in 0..20 {
        posteriors = Some(em::e_step(&data, &theta).unwrap());
    }
    println!("e_step: {:.2}ms", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);
    let (post, _) = posteriors.unwrap();

    // Time the emission inner solver alone.
    let t0 = Instant::now();
    for _ in 0..20 {
        fit_weighted_emission(&data, &post, &theta.emission).unwrap();
    }
    println!("emission m-step: {:.2}ms", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);

    // Time the chain m-step alone.
    let lmdrop::params::LatentParams::Markov(lmdrop::chain::ChainParams::Parametric(chain)) =
        &theta.latent else { panic!() };
    let t0 = Instant::now();
    for _ in 0..20 {
        em::m_step_chain_parametric(&data, &post, chain, true).unwrap();
    }
    println!("chain m-step: {:.2}ms", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);

    // Full EM iterations for comparison.
    let t0 = Instant::now();
    let run = em::run_em(&data, &theta, 1e-12, 20, true).unwrap();
    println!("full run_em 20 iters: {:.2}ms/iter (n_iter={})",
        t0.elapsed().as_secs_f64() * 1000.0 / run.n_iter as f64, run.n_iter);
}
