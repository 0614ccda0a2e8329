//! Command-line driver: simulate panels, fit the models, compare them by
//! information criteria, bootstrap standard errors, decode latent states and
//! run replication studies.
//!
//! Every command writes plain delimited tables plus a `manifest.kv`
//! recording the resolved configuration, seed and version, so runs are
//! reproducible and the outputs feed external plotting directly.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use lmdrop::config::{ChainVariant, ModelConfig};
use lmdrop::data::{load_dataset, write_dataset, Dataset};
use lmdrop::em::{fit_em, fit_time_constant, EmConfig, FitResult};
use lmdrop::inference::{
    average_state_probs, classification_index_h, decode_at_attrition, local_decode, param_count,
    parametric_bootstrap, BootstrapOptions, CriteriaRow, DecodedStates,
};
use lmdrop::kv::KvFile;
use lmdrop::params::{ModelKind, ParameterSet};
use lmdrop::sim::{run_replications, simulate, Scheme, SchemeSpec};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exit codes: 0 success, 2 usage, 3 non-convergence, 4 invalid input state.
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_INVALID_INPUT: u8 = 4;

#[derive(Parser)]
#[command(name = "lmdrop", version, about = "Latent-Markov models for longitudinal binary data with informative dropout")]
struct Cli {
    /// Worker threads (default: all cores; env LMDROP_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with informative dropout.
    Simulate(SimulateArgs),
    /// Fit one model to a dataset.
    Fit(FitArgs),
    /// Fit a range of state counts and tabulate information criteria.
    Select(SelectArgs),
    /// Parametric bootstrap standard errors around a fitted model.
    Bootstrap(BootstrapArgs),
    /// Local decoding tables from a fitted model.
    Decode(DecodeArgs),
    /// Replication study: simulate, fit, and report bias/SD/MSE.
    Replicate(ReplicateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator: conditional (dropout-time first) or joint (hazard-driven).
    #[arg(long)]
    scheme: String,
    /// Number of subjects.
    #[arg(long)]
    n: usize,
    /// Panel horizon.
    #[arg(long = "T")]
    horizon: usize,
    /// Fixed effect on the standard-normal covariate.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model configuration file (key = value).
    #[arg(long)]
    config: PathBuf,
    /// m1 (latent Markov) or m2 (time-constant baseline).
    #[arg(long, default_value = "m1")]
    model: String,
    /// Chain variant override: parametric or saturated.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random starts for the short-run phase.
    #[arg(long, default_value_t = 20)]
    starts: usize,
    /// Candidates advanced to long runs.
    #[arg(long, default_value_t = 10)]
    retained: usize,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Skip the quasi-Newton polish.
    #[arg(long)]
    no_newton: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 2)]
    j_min: usize,
    #[arg(long, default_value_t = 4)]
    j_max: usize,
    /// Comma-separated models to compare (m1, m2).
    #[arg(long, default_value = "m1,m2")]
    models: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    starts: usize,
    #[arg(long, default_value_t = 10)]
    retained: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Fitted parameter file (params.kv from `fit`).
    #[arg(long)]
    params: PathBuf,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 200)]
    n_replicates: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Also redraw dropout times from their empirical distribution.
    #[arg(long)]
    resample_dropout: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    n: usize,
    #[arg(long = "T")]
    horizon: usize,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value = "m1,m2")]
    models: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli
        .threads
        .or_else(|| std::env::var("LMDROP_THREADS").ok().and_then(|v| v.parse().ok()))
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Replicate(args) => cmd_replicate(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_INVALID_INPUT)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("LMDROP_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn base_manifest(seed: u64) -> KvFile {
    let mut kv = KvFile::new();
    kv.push("version", env!("CARGO_PKG_VERSION"));
    kv.push("seed", seed);
    kv
}

fn write_table(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<u8> {
    let seed = resolve_seed(args.seed);
    let scheme: Scheme = args.scheme.parse()?;
    let mut spec = match scheme {
        Scheme::Conditional => SchemeSpec::conditional(args.n, args.horizon, seed),
        Scheme::Joint => SchemeSpec::joint(args.n, args.horizon, seed),
    };
    spec.beta = args.beta;
    std::fs::create_dir_all(&args.out)?;
    let (data, truth) = simulate(&spec);

    write_dataset(&data, &args.out.join("data.csv"))?;
    let truth_rows: Vec<String> = truth
        .iter()
        .flat_map(|t| {
            t.states
                .iter()
                .enumerate()
                .map(move |(i, s)| format!("{},{},{}", t.subject_id, i + 1, s))
        })
        .collect();
    write_table(&args.out.join("truth.csv"), "id,time,state", &truth_rows)?;

    let counts = data.dropout_counts();
    let count_rows: Vec<String> = counts
        .iter()
        .enumerate()
        .map(|(t, c)| format!("{},{}", t + 1, c))
        .collect();
    write_table(&args.out.join("dropout_counts.csv"), "time,count", &count_rows)?;

    // A ready-to-use model configuration for fitting this dataset.
    let config = spec.model_config(spec.n_states(), ChainVariant::Parametric);
    config.to_kv().write(&args.out.join("config.kv"))?;

    let mut manifest = base_manifest(seed);
    manifest.push("command", "simulate");
    manifest.push("scheme", scheme.as_str());
    manifest.push("n", spec.n_subjects);
    manifest.push("T", spec.horizon);
    manifest.push("beta", spec.beta);
    for (j, u) in spec.intercepts.iter().enumerate() {
        manifest.push(format!("intercept.{}", j + 1), u);
    }
    match scheme {
        Scheme::Conditional => {
            for (j, c) in spec.chain.gamma.coef.iter().enumerate() {
                manifest.push(format!("gamma.{}.0", j + 1), c[0]);
                manifest.push(format!("gamma.{}.1", j + 1), c[1]);
            }
            for (k, row) in spec.chain.phi.iter().enumerate() {
                for (j, c) in row.coef.iter().enumerate() {
                    manifest.push(format!("phi.{}.{}.0", k + 1, j + 1), c[0]);
                    manifest.push(format!("phi.{}.{}.1", k + 1, j + 1), c[1]);
                }
            }
        }
        Scheme::Joint => {
            for (j, p) in spec.initial.iter().enumerate() {
                manifest.push(format!("pi.{}", j + 1), p);
            }
            for (k, row) in spec.transition.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    manifest.push(format!("A.{}.{}", k + 1, j + 1), p);
                }
            }
            for (j, l) in spec.dropout_logits.iter().enumerate() {
                manifest.push(format!("dropout_logit.{}", j + 1), l);
            }
        }
    }
    manifest.write(&args.out.join("manifest.kv"))?;
    println!(
        "simulated {} subjects over T = {} ({} scheme) into {}",
        spec.n_subjects,
        spec.horizon,
        scheme.as_str(),
        args.out.display()
    );
    Ok(0)
}

fn parse_model_kind(model: &str, variant: ChainVariant) -> anyhow::Result<ModelKind> {
    match model {
        "m1" => Ok(match variant {
            ChainVariant::Parametric => ModelKind::M1Parametric,
            ChainVariant::Saturated => ModelKind::M1Saturated,
        }),
        "m2" => Ok(ModelKind::M2),
        other => Err(anyhow!("unknown model `{other}` (expected m1 or m2)")),
    }
}

fn em_config(seed: u64, starts: usize, retained: usize, max_iter: usize, no_newton: bool) -> EmConfig {
    EmConfig {
        n_short_starts: starts,
        n_retained: retained,
        max_iter,
        refine_with_newton: !no_newton,
        seed,
        ..EmConfig::default()
    }
}

fn run_fit(
    data: &Dataset,
    config: &ModelConfig,
    em: &EmConfig,
    kind: ModelKind,
) -> anyhow::Result<FitResult> {
    let fit = match kind {
        ModelKind::M1Parametric => fit_em(data, config, em, ChainVariant::Parametric),
        ModelKind::M1Saturated => fit_em(data, config, em, ChainVariant::Saturated),
        ModelKind::M2 => fit_time_constant(data, config, em),
    }?;
    Ok(fit)
}

fn write_fit_outputs(
    out: &Path,
    data: &Dataset,
    config: &ModelConfig,
    fit: &FitResult,
) -> anyhow::Result<()> {
    let k = param_count(
        fit.model,
        config.n_states,
        config.p1(),
        config.p2(),
        data.horizon,
    );
    let h = if config.n_states >= 2 {
        Some(classification_index_h(&fit.posteriors, config.n_states)?)
    } else {
        None
    };

    let mut extra = vec![
        ("converged", fit.converged.to_string()),
        ("loglik", fit.loglik.to_string()),
        ("n_iter", fit.n_iter.to_string()),
        ("k", k.to_string()),
        ("n_subjects", data.n_subjects().to_string()),
        ("spurious", fit.spurious_flag.to_string()),
        ("separation", fit.flags.separation.to_string()),
        ("slope_unidentified", fit.flags.slope_unidentified.to_string()),
        (
            "empty_transition_row",
            fit.flags.empty_transition_row.to_string(),
        ),
        (
            "newton_line_search_failed",
            fit.flags.newton_line_search_failed.to_string(),
        ),
    ];
    if let Some(h) = h {
        extra.push(("H", h.to_string()));
    }
    let extra_refs: Vec<(&str, String)> = extra.iter().map(|(k, v)| (*k, v.clone())).collect();
    fit.theta.to_kv(&extra_refs).write(&out.join("params.kv"))?;

    let trace_rows: Vec<String> = fit
        .loglik_trace
        .iter()
        .enumerate()
        .map(|(i, ll)| format!("{i},{ll}"))
        .collect();
    write_table(&out.join("trace.csv"), "iter,loglik", &trace_rows)?;

    let mut post_rows = Vec::with_capacity(data.n_obs() * config.n_states);
    for (panel, post) in data.panels.iter().zip(&fit.posteriors.subjects) {
        for (t, row) in post.xi.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                post_rows.push(format!("{},{},{},{}", panel.subject_id, t + 1, j + 1, p));
            }
        }
    }
    write_table(&out.join("posteriors.csv"), "id,time,state,prob", &post_rows)?;

    let decoded = local_decode(&fit.posteriors);
    write_decoded(&out.join("decoded.csv"), data, &fit, &decoded)?;
    Ok(())
}

fn write_decoded(
    path: &Path,
    data: &Dataset,
    fit: &FitResult,
    decoded: &DecodedStates,
) -> anyhow::Result<()> {
    let mut rows = Vec::with_capacity(data.n_obs());
    for ((panel, post), (seq, ties)) in data
        .panels
        .iter()
        .zip(&fit.posteriors.subjects)
        .zip(decoded.states.iter().zip(&decoded.ties))
    {
        for (t, (&state, &tie)) in seq.iter().zip(ties).enumerate() {
            rows.push(format!(
                "{},{},{},{},{}",
                panel.subject_id,
                t + 1,
                state + 1,
                post.xi[t][state],
                u8::from(tie)
            ));
        }
    }
    write_table(path, "id,time,state,prob,tie", &rows)?;
    Ok(())
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<u8> {
    let seed = resolve_seed(args.seed);
    let mut config = ModelConfig::load(&args.config)?;
    if let Some(v) = &args.variant {
        config.chain_variant = v.parse()?;
    }
    let kind = parse_model_kind(&args.model, config.chain_variant)?;
    let data = load_dataset(&args.data, &config)?;
    let em = em_config(seed, args.starts, args.retained, args.max_iter, args.no_newton);
    let fit = run_fit(&data, &config, &em, kind)?;

    std::fs::create_dir_all(&args.out)?;
    write_fit_outputs(&args.out, &data, &config, &fit)?;
    let mut manifest = base_manifest(seed);
    manifest.push("command", "fit");
    manifest.push("model", kind.model_name());
    if let Some(v) = kind.variant() {
        manifest.push("variant", v.as_str());
    }
    manifest.push("data", args.data.display());
    for (key, value) in config.to_kv().iter() {
        manifest.push(format!("config.{key}"), value);
    }
    manifest.write(&args.out.join("manifest.kv"))?;

    println!(
        "fit {}: loglik = {:.6}, converged = {}, outputs in {}",
        kind.model_name(),
        fit.loglik,
        fit.converged,
        args.out.display()
    );
    Ok(if fit.converged { 0 } else { EXIT_NONCONVERGENCE })
}

fn parse_models(models: &str) -> anyhow::Result<Vec<&str>> {
    let list: Vec<&str> = models.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    for m in &list {
        if *m != "m1" && *m != "m2" {
            return Err(anyhow!("unknown model `{m}` in --models"));
        }
    }
    Ok(list)
}

fn criteria_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.3}")
    }
}

fn cmd_select(args: SelectArgs) -> anyhow::Result<u8> {
    let seed = resolve_seed(args.seed);
    let config = ModelConfig::load(&args.config)?;
    let data = load_dataset(&args.data, &config)?;
    let models = parse_models(&args.models)?;
    if args.j_min < 1 || args.j_min > args.j_max {
        return Err(anyhow!("need 1 <= j_min <= j_max"));
    }

    let mut rows: Vec<(ModelKind, usize, CriteriaRow, bool)> = Vec::new();
    let mut all_converged = true;
    for model in &models {
        let kind = parse_model_kind(model, config.chain_variant)?;
        for j in args.j_min..=args.j_max {
            let mut cfg_j = config.clone();
            cfg_j.n_states = j;
            let em = em_config(seed, args.starts, args.retained, 1000, false);
            let fit = run_fit(&data, &cfg_j, &em, kind)?;
            all_converged &= fit.converged;
            let k = param_count(kind, j, cfg_j.p1(), cfg_j.p2(), data.horizon);
            rows.push((
                kind,
                j,
                CriteriaRow::new(fit.loglik, k, data.n_subjects()),
                fit.converged,
            ));
        }
    }

    let table_rows: Vec<String> = rows
        .iter()
        .map(|(kind, j, c, _)| {
            format!(
                "{},{},{},{:.3},{},{},{},{},{}",
                kind.model_name(),
                j,
                c.k,
                c.loglik,
                criteria_cell(c.aic),
                criteria_cell(c.aic3),
                criteria_cell(c.aicc),
                criteria_cell(c.aicu),
                criteria_cell(c.bic)
            )
        })
        .collect();
    std::fs::create_dir_all(&args.out)?;
    write_table(
        &args.out.join("criteria.csv"),
        "model,J,k,loglik,AIC,AIC3,AICc,AICu,BIC",
        &table_rows,
    )?;

    // Report the winner under each criterion.
    type Getter = fn(&CriteriaRow) -> f64;
    let criteria: [(&str, Getter); 5] = [
        ("AIC", |c| c.aic),
        ("AIC3", |c| c.aic3),
        ("AICc", |c| c.aicc),
        ("AICu", |c| c.aicu),
        ("BIC", |c| c.bic),
    ];
    let mut summary = String::new();
    for (name, get) in criteria {
        let best = rows
            .iter()
            .filter(|(_, _, c, _)| !get(c).is_nan())
            .min_by(|a, b| get(&a.2).total_cmp(&get(&b.2)));
        if let Some((kind, j, c, _)) = best {
            let _ = writeln!(
                summary,
                "best {name}: {} J={} ({:.3})",
                kind.model_name(),
                j,
                get(c)
            );
        }
    }
    print!("{summary}");
    std::fs::write(args.out.join("best.txt"), summary)?;

    let mut manifest = base_manifest(seed);
    manifest.push("command", "select");
    manifest.push("models", args.models.clone());
    manifest.push("j_min", args.j_min);
    manifest.push("j_max", args.j_max);
    manifest.write(&args.out.join("manifest.kv"))?;
    Ok(if all_converged { 0 } else { EXIT_NONCONVERGENCE })
}

fn cmd_bootstrap(args: BootstrapArgs) -> anyhow::Result<u8> {
    let seed = resolve_seed(args.seed);
    let config = ModelConfig::load(&args.config)?;
    let data = load_dataset(&args.data, &config)?;
    let kv = KvFile::read(&args.params)?;
    if kv.get("converged") != Some("true") {
        eprintln!("error: input fit is not converged; refusing to bootstrap");
        return Ok(EXIT_INVALID_INPUT);
    }
    let theta = ParameterSet::from_kv(&kv)?;
    let options = BootstrapOptions {
        n_replicates: args.n_replicates,
        seed,
        resample_dropout: args.resample_dropout,
        em: EmConfig {
            seed,
            ..EmConfig::default()
        },
    };
    let result = parametric_bootstrap(&data, &theta, &options)?;

    let (names, estimates) = theta.flatten();
    let rows: Vec<String> = names
        .iter()
        .zip(&estimates)
        .zip(&result.se)
        .map(|((name, est), se)| format!("{name},{est},{se}"))
        .collect();
    std::fs::create_dir_all(&args.out)?;
    write_table(&args.out.join("se.csv"), "parameter,estimate,se", &rows)?;

    let mut manifest = base_manifest(seed);
    manifest.push("command", "bootstrap");
    manifest.push("B", result.n_replicates);
    manifest.push("n_failed", result.n_failed);
    manifest.push("warn_high_failure", result.warn_high_failure);
    manifest.push("resample_dropout", args.resample_dropout);
    manifest.write(&args.out.join("manifest.kv"))?;

    if result.warn_high_failure {
        eprintln!(
            "warning: {} of {} bootstrap replicates failed to converge",
            result.n_failed, result.n_replicates
        );
    }
    println!(
        "bootstrap: {} replicates, {} failed, SEs in {}",
        result.n_replicates,
        result.n_failed,
        args.out.join("se.csv").display()
    );
    Ok(0)
}

fn cmd_decode(args: DecodeArgs) -> anyhow::Result<u8> {
    let config = ModelConfig::load(&args.config)?;
    let data = load_dataset(&args.data, &config)?;
    let kv = KvFile::read(&args.params)?;
    let theta = ParameterSet::from_kv(&kv)?;
    let (posteriors, ll) = lmdrop::em::e_step(&data, &theta)?;
    let decoded = local_decode(&posteriors);
    let j_states = theta.n_states();

    std::fs::create_dir_all(&args.out)?;
    // Decoded sequences.
    let fitlike = FitResult {
        model: theta.model_kind(),
        theta: theta.clone(),
        loglik: ll.total,
        loglik_trace: vec![],
        converged: true,
        n_iter: 0,
        posteriors,
        spurious_flag: false,
        flags: Default::default(),
    };
    write_decoded(&args.out.join("decoded.csv"), &data, &fitlike, &decoded)?;

    // Clustering at attrition: states in rows, dropout times in columns.
    let attrition = decode_at_attrition(&data, &decoded, j_states);
    let header = std::iter::once("state".to_string())
        .chain((1..=data.horizon).map(|t| t.to_string()))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = attrition
        .iter()
        .enumerate()
        .map(|(j, row)| {
            std::iter::once((j + 1).to_string())
                .chain(row.iter().map(|c| c.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_table(&args.out.join("attrition.csv"), &header, &rows)?;

    // Average state probabilities by occasion.
    let avg = average_state_probs(&data, &fitlike.posteriors, j_states);
    let header = std::iter::once("time".to_string())
        .chain((1..=j_states).map(|j| format!("state_{j}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = avg
        .iter()
        .enumerate()
        .map(|(t, row)| {
            std::iter::once((t + 1).to_string())
                .chain(row.iter().map(|p| p.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_table(&args.out.join("avgprobs.csv"), &header, &rows)?;

    let mut manifest = base_manifest(0);
    manifest.push("command", "decode");
    manifest.push("params", args.params.display());
    manifest.push("ties", decoded.any_tie());
    manifest.write(&args.out.join("manifest.kv"))?;
    println!("decoded {} subjects into {}", data.n_subjects(), args.out.display());
    Ok(0)
}

fn cmd_replicate(args: ReplicateArgs) -> anyhow::Result<u8> {
    let seed = resolve_seed(args.seed);
    let scheme: Scheme = args.scheme.parse()?;
    let spec = match scheme {
        Scheme::Conditional => SchemeSpec::conditional(args.n, args.horizon, seed),
        Scheme::Joint => SchemeSpec::joint(args.n, args.horizon, seed),
    };
    let kinds: Vec<ModelKind> = parse_models(&args.models)?
        .iter()
        .map(|m| match *m {
            "m1" => ModelKind::M1Parametric,
            _ => ModelKind::M2,
        })
        .collect();
    let report = run_replications(&spec, args.reps, &kinds)?;

    std::fs::create_dir_all(&args.out)?;
    let rows: Vec<String> = report
        .models
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{},{},{:.4},{:.4},{:.4}",
                m.model.model_name(),
                report.n_subjects,
                report.horizon,
                report.n_reps,
                m.n_used,
                m.n_failed,
                m.bias,
                m.std_dev,
                m.mse
            )
        })
        .collect();
    write_table(
        &args.out.join("report.csv"),
        "model,n,T,reps,used,failed,bias,std_dev,mse",
        &rows,
    )?;

    let mut manifest = base_manifest(seed);
    manifest.push("command", "replicate");
    manifest.push("scheme", scheme.as_str());
    manifest.push("n", args.n);
    manifest.push("T", args.horizon);
    manifest.push("reps", args.reps);
    manifest.push("beta", spec.beta);
    manifest.push("invalid", report.invalid);
    manifest.write(&args.out.join("manifest.kv"))?;

    for m in &report.models {
        println!(
            "{}: bias = {:.4}, sd = {:.4}, mse = {:.4} ({} used, {} failed)",
            m.model.model_name(),
            m.bias,
            m.std_dev,
            m.mse,
            m.n_used,
            m.n_failed
        );
    }
    if report.invalid {
        eprintln!("warning: more than 20% of fits failed; report flagged invalid");
        return Ok(EXIT_NONCONVERGENCE);
    }
    Ok(0)
}
