use lmdrop::em::{self, EmConfig};
use lmdrop::params::ModelKind;
use lmdrop::sim::{simulate_conditional, SchemeSpec};
use std::time::Instant;

#[test]
fn probe_stages() {
    let spec = SchemeSpec::conditional(500, 10, 123);
    let (data, _) = simulate_conditional(&spec);
    let config = spec.model_config(2, lmdrop::ChainVariant::Parametric);
    let em_cfg = EmConfig { n_short_starts: 5, n_retained: 5, seed: 42, ..EmConfig::default() };

    let t0 = Instant::now();
    let cands = em::short_run_init(&data, &config, &em_cfg, ModelKind::M1Parametric).unwrap();
    println!("short runs: {:.1}s ({} candidates)", t0.elapsed().as_secs_f64(), cands.len());

    let mut best: Option<em::EmRun> = None;
    for (i, c) in cands.iter().enumerate() {
        let t0 = Instant::now();
        let run = em::run_em(&data, &c.theta, 1e-5, 1000, true).unwrap();
        println!("long run {i}: {:.1}s iters={} loglik={:.3} conv={}",
            t0.elapsed().as_secs_f64(), run.n_iter, run.loglik, run.converged);
        if best.as_ref().map_or(true, |b| run.loglik > b.loglik) { best = Some(run); }
    }
    let best = best.unwrap();
    let t0 = Instant::now();
    let out = lmdrop::optim::refine_newton(&data, &best.theta, &em_cfg).unwrap();
    println!("newton: {:.1}s iters={} conv={} lsfail={} gain={:.6}",
        t0.elapsed().as_secs_f64(), out.n_iter, out.converged, out.line_search_failed,
        out.trace.last().unwrap() - best.loglik);
}
