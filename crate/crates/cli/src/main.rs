//! `corrector-lab`: command-line driver for corrector solves, Monte-Carlo
//! homogenization and the desk-scale rate experiments.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use corrector_core::config::RunConfig;
use corrector_core::experiments::{run_derivative_representation, run_named, write_record, RunRecord};
use corrector_core::field::sample_parameter_field;
use corrector_core::grid::write_field;
use corrector_core::homogenize::write_estimate;
use corrector_core::operator::validate_assumptions;
use corrector_core::{seeds, Error as CoreError, Spectral};

const SCHEMA: &str = include_str!("../../../docs/config.schema.json");

/// Samples drawn by `validate-model`.
const ASSUMPTION_SAMPLES: usize = 20_000;
/// Half-width of the `xi` box probed by `validate-model`.
const ASSUMPTION_XI_BOX: f64 = 4.0;

#[derive(Parser, Debug)]
#[command(name = "corrector-lab", version, about = "Massive correctors, linearized hierarchies and homogenization experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration, or a run manifest whose embedded config is reused.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Only warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Exit with status 3 when a blocking check fails.
    #[arg(long = "assert", global = true)]
    gate: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Sample one parameter field and write it as `omega.fld`.
    SampleField,
    /// Monte-Carlo check of monotonicity, boundedness and omega-Lipschitz bounds.
    ValidateModel,
    /// Solve the massive corrector for one sample at `xi`.
    SolveCorrector,
    /// Solve the linearized hierarchy and flux correctors for one sample.
    Hierarchy,
    /// Estimate the homogenized operator at `xi`.
    Homogenize,
    /// Estimate the derivative of the homogenized operator along `directions`.
    Derivative,
    /// Quenched Taylor remainders of the correctors.
    Taylor,
    /// Finite-difference check of the parameter-field sensitivities.
    SensitivityCheck,
    /// Corrector moments against the massive parameter.
    #[command(name = "scaling-T")]
    ScalingT,
    /// Matched-seed convergence as the massive parameter grows.
    TConvergence,
    /// Corrector increments against distance in one dimension.
    GrowthD1,
    /// Variance of ball averages against the radius.
    VarianceDecay,
    /// Two-scale expansion error along a ladder of scale ratios.
    TwoScale,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SampleField => "sample-field",
            Command::ValidateModel => "validate-model",
            Command::SolveCorrector => "solve-corrector",
            Command::Hierarchy => "hierarchy",
            Command::Homogenize => "homogenize",
            Command::Derivative => "derivative",
            Command::Taylor => "taylor",
            Command::SensitivityCheck => "sensitivity-check",
            Command::ScalingT => "scaling-T",
            Command::TConvergence => "t-convergence",
            Command::GrowthD1 => "growth-d1",
            Command::VarianceDecay => "variance-decay",
            Command::TwoScale => "two-scale",
        }
    }
}

/// Bad invocation or configuration; exit status 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Blocking checks failed under `--assert`; exit status 3.
#[derive(Debug)]
struct GateFailed(Vec<String>);

impl fmt::Display for GateFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocking checks failed: {}", self.0.join("; "))
    }
}

impl std::error::Error for GateFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<GateFailed>().is_some() {
                ExitCode::from(3)
            } else if is_usage(&e) {
                eprintln!("\n{}", schema_help());
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<Usage>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<CoreError>(),
        Some(CoreError::InvalidParameter(_) | CoreError::InvalidGrid(_) | CoreError::Json(_) | CoreError::OrderUnavailable(_))
    )
}

/// Top-level keys of the configuration schema with their descriptions.
fn schema_help() -> String {
    let schema: Value = serde_json::from_str(SCHEMA).expect("embedded schema is valid JSON");
    let required: Vec<&str> = schema["required"].as_array().into_iter().flatten().filter_map(Value::as_str).collect();
    let mut out = String::from("configuration keys (full JSON schema in docs/config.schema.json):\n");
    if let Some(props) = schema["properties"].as_object() {
        for (key, p) in props {
            let tag = if required.contains(&key.as_str()) { " (required)" } else { "" };
            let desc = p["description"].as_str().unwrap_or("");
            out.push_str(&format!("  {key:<12}{tag:<11} {desc}\n"));
        }
    }
    out
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let path = g.config.as_ref().ok_or_else(|| Usage("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    if value.get("experiment").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    let cfg = RunConfig::from_value(value).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    let out = g.out.as_ref().map(|p| p.to_string_lossy().into_owned());
    Ok(cfg.with_overrides(g.seed, out.as_deref()))
}

fn output_dir(cfg: &RunConfig, command: Command) -> PathBuf {
    cfg.output_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| Path::new("runs").join(command.name()))
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.workers {
        if n == 0 {
            return Err(Usage("--workers must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let cfg = load_config(g)?;
    let dir = output_dir(&cfg, cli.command);
    log::info!("{} -> {}", cli.command.name(), dir.display());
    let report = match cli.command {
        Command::SampleField => sample_field(&cfg, &dir)?,
        Command::ValidateModel => validate_model(&cfg, &dir, g.gate)?,
        Command::SolveCorrector => solve_corrector(&cfg, &dir)?,
        Command::Hierarchy => hierarchy(&cfg, &dir)?,
        Command::Homogenize => homogenize(&cfg, &dir)?,
        Command::Derivative => derivative(&cfg, &dir, g.gate)?,
        experiment => {
            let rec = run_named(experiment.name(), &cfg)?;
            write_record(&rec, &dir)?;
            gate(&rec, g.gate)?;
            record_report(&rec)
        }
    };
    if !g.quiet {
        let mut out = std::io::stdout().lock();
        match writeln!(out, "{}", serde_json::to_string_pretty(&report)?) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        }
    }
    Ok(())
}

fn record_report(rec: &RunRecord) -> Value {
    json!({
        "experiment": rec.experiment,
        "passed": rec.passed(),
        "fits": rec.fits,
        "checks": rec.checks,
        "failed_samples": rec.failed_samples,
        "wall_time_s": rec.wall_time_s,
    })
}

fn gate(rec: &RunRecord, enforce: bool) -> Result<()> {
    let failed: Vec<String> = rec.failed_checks().iter().map(|c| format!("{} = {:e}", c.name, c.value)).collect();
    if failed.is_empty() {
        return Ok(());
    }
    for f in &failed {
        log::warn!("check failed: {f}");
    }
    if enforce {
        return Err(GateFailed(failed).into());
    }
    Ok(())
}

fn first_seed(cfg: &RunConfig) -> u64 {
    seeds::split(cfg.master_seed, 0)
}

fn sample_field(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let seed = first_seed(cfg);
    let field = sample_parameter_field::<f64>(&cfg.field, &cfg.grid, seed)?;
    std::fs::create_dir_all(dir)?;
    write_field(dir.join("omega.fld"), field.omega())?;
    let omega = field.omega();
    let n = field.n_components();
    let mut buf = vec![0.0; n];
    let mut max_norm: f64 = 0.0;
    for node in 0..cfg.grid.nodes() {
        omega.node_into(node, &mut buf);
        max_norm = max_norm.max(buf.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let report = json!({
        "schema": 1,
        "seed": seed,
        "master_seed": cfg.master_seed,
        "grid": cfg.grid,
        "field": cfg.field,
        "channel_mean": omega.mean(),
        "max_norm": max_norm,
    });
    std::fs::write(dir.join("field.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn validate_model(cfg: &RunConfig, dir: &Path, enforce: bool) -> Result<Value> {
    let rep = validate_assumptions(&cfg.model()?, ASSUMPTION_SAMPLES, cfg.master_seed, ASSUMPTION_XI_BOX);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
    if enforce && !rep.passed {
        return Err(GateFailed(vec![format!("model {} violates its declared constants", rep.model)]).into());
    }
    Ok(serde_json::to_value(rep)?)
}

fn solve_corrector(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let ens = cfg.ensemble()?;
    let seed = first_seed(cfg);
    let omega = ens.sample(seed)?;
    let sp = Spectral::new(cfg.grid);
    let st = corrector_core::corrector::solve_nonlinear(&sp, &omega, &ens.model, &cfg.xi(), cfg.mass, &cfg.solver)?;
    st.save(dir, &[seed])?;
    Ok(serde_json::to_value(st.summary(&[seed]))?)
}

fn hierarchy(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let ens = cfg.ensemble()?;
    let seed = first_seed(cfg);
    let omega = ens.sample(seed)?;
    let sp = Spectral::new(cfg.grid);
    let mut fam = ens.family(&sp, &omega, &cfg.xi(), &cfg.direction_set()?)?;
    fam.attach_all_flux_correctors(&sp)?;
    let manifest = fam.save(dir, &[seed])?;
    Ok(serde_json::to_value(manifest)?)
}

fn homogenize(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let (est, rows) = cfg.ensemble()?.estimate_a_hom(&cfg.xi(), cfg.samples, cfg.master_seed)?;
    write_estimate(dir, &est, &rows, &cfg.to_value())?;
    Ok(serde_json::to_value(est)?)
}

/// Ensemble estimate of the derivative; with a `derivative` block the quenched
/// representation check runs as well and is gated.
fn derivative(cfg: &RunConfig, dir: &Path, enforce: bool) -> Result<Value> {
    let (est, rows) = cfg.ensemble()?.estimate_derivative(&cfg.xi(), &cfg.direction_set()?, cfg.samples, cfg.master_seed)?;
    write_estimate(dir, &est, &rows, &cfg.to_value())?;
    let mut report = json!({ "estimate": est });
    if cfg.derivative.is_some() {
        let rec = run_derivative_representation(cfg)?;
        write_record(&rec, dir.join("representation"))?;
        report["representation"] = record_report(&rec);
        gate(&rec, enforce)?;
    }
    Ok(report)
}
