use lmdrop::em::{self, EmConfig};
use lmdrop::glm::fit_weighted_emission;
use lmdrop::params::{LatentParams, ModelKind, ParameterSet};
use lmdrop::chain::ChainParams;
use lmdrop::sim::{simulate_conditional, SchemeSpec};
use std::time::Instant;

#[test]
fn probe_loop() {
    let spec = SchemeSpec::conditional(500, 10, 123);
    let (data, _) = simulate_conditional(&spec);
    let config = spec.model_config(2, lmdrop::ChainVariant::Parametric);
    let em_cfg = EmConfig { n_short_starts: 5, n_retained: 5, seed: 42, ..EmConfig::default() };
    let cands = em::short_run_init(&data, &config, &em_cfg, ModelKind::M1Parametric).unwrap();
    let mut theta = cands[0].theta.clone();

    let (mut te, mut tc, mut tm) = (0.0, 0.0, 0.0);
    for _ in 0..20 {
        let t0 = Instant::now();
        let (post, _ll) = em::e_step(&data, &theta).unwrap();
        te += t0.elapsed().as_secs_f64();

        let LatentParams::Markov(ChainParams::Parametric(chain)) = &theta.latent else { panic!() };
        let t0 = Instant::now();
        let (new_chain, _) = em::m_step_chain_parametric(&data, &post, chain, true).unwrap();
        tc += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let emfit = fit_weighted_emission(&data, &post, &theta.emission).unwrap();
        tm += t0.elapsed().as_secs_f64();

        theta = ParameterSet {
            emission: emfit.params,
            latent: LatentParams::Markov(ChainParams::Parametric(new_chain)),
        };
    }
    println!("manual loop x20: e_step {:.1}ms chain {:.1}ms emission {:.1}ms per iter",
        te * 50.0, tc * 50.0, tm * 50.0);
}
