use lmdrop::em::{fit_em, fit_time_constant};
use lmdrop::sim::{replication_em_config, simulate_conditional, SchemeSpec};
use lmdrop::ChainVariant;
use std::time::Instant;

#[test]
fn probe_replicate_cost() {
    let spec = SchemeSpec::conditional(500, 10, 123);
    let (data, _) = simulate_conditional(&spec);
    let config = spec.model_config(2, ChainVariant::Parametric);
    let em = replication_em_config(42);

    let t0 = Instant::now();
    let m1 = fit_em(&data, &config, &em, ChainVariant::Parametric).unwrap();
    let t1 = t0.elapsed().as_secs_f64();
    println!("M1: {t1:.1}s loglik={:.3} conv={} n_iter={} trace_len={}",
        m1.loglik, m1.converged, m1.n_iter, m1.loglik_trace.len());

    let t0 = Instant::now();
    let m2 = fit_time_constant(&data, &config, &em).unwrap();
    let t2 = t0.elapsed().as_secs_f64();
    println!("M2: {t2:.1}s loglik={:.3} conv={} n_iter={} trace_len={}",
        m2.loglik, m2.converged, m2.n_iter, m2.loglik_trace.len());
}
