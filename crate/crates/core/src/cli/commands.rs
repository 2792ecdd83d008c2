//! `fit`, `simulate` and `version`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use super::config::{parse_h_flag, parse_probs_flag, parse_ratio_flag, split_list, FitConfig};
use super::io::read_long_csv;
use super::result::{FitResult, InputInfo, ResultDocument, Software};
use crate::comparators::{fit_ipw, fit_naive};
use crate::data::ModelFrame;
use crate::error::{Result, SorError};
use crate::family::FamilyKind;
use crate::simlab::{preset, run_scenario, Estimator, MetricsTable, SimScenario};
use crate::sorfit::fit_sor;

/// Environment variable holding the worker-thread count for `simulate`.
pub const THREADS_ENV: &str = "SOR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sor", version, about = "Marginal GLMs for longitudinal data under auxiliary-variable-dependent sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a marginal model to a long-format CSV.
    Fit(FitArgs),
    /// Run a simulation preset or scenario file and write a metrics CSV.
    Simulate(SimulateArgs),
    /// Print the software version.
    Version,
}

#[derive(Debug, Args, Default)]
pub struct FitArgs {
    /// JSON fit configuration; inline flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format CSV, one row per sampled observation.
    #[arg(long)]
    pub data: PathBuf,
    /// Result document path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the estimates table as CSV.
    #[arg(long)]
    pub estimates_csv: Option<PathBuf>,
    /// sor, naive or ipw.
    #[arg(long)]
    pub estimator: Option<String>,
    /// gaussian, poisson or bernoulli.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub time: Option<String>,
    /// Column with the 0/1 auxiliary indicator.
    #[arg(long)]
    pub aux: Option<String>,
    /// Comma-separated mean-model columns; "1" is the intercept.
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub w1: Option<String>,
    #[arg(long)]
    pub w2: Option<String>,
    /// identity, abs or indicator:<c>.
    #[arg(long)]
    pub h: Option<String>,
    /// independence or exchangeable.
    #[arg(long)]
    pub working: Option<String>,
    #[arg(long)]
    pub y0: Option<f64>,
    #[arg(long)]
    pub no_interference: bool,
    /// subject or observation.
    #[arg(long)]
    pub level: Option<String>,
    /// Comma-separated stratum columns.
    #[arg(long)]
    pub strata: Option<String>,
    /// Design ratios, e.g. "1=22.619;0=6.670" ("*" matches any stratum).
    #[arg(long)]
    pub ratio: Option<String>,
    /// Sampling probabilities, e.g. "*=1:0.11".
    #[arg(long)]
    pub probs: Option<String>,
    /// Comma-separated multipliers on every ratio; one fit per value.
    #[arg(long)]
    pub ratio_scale: Option<String>,
    /// Add exponentiated estimates and intervals.
    #[arg(long)]
    pub exp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Scale {
    #[default]
    Scaled,
    Full,
}

#[derive(Debug, Args, Default)]
pub struct SimulateArgs {
    /// Named preset.
    #[arg(long, conflicts_with = "scenario")]
    pub preset: Option<String>,
    /// JSON scenario file (a scenario object or an array of them).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Scale::Scaled)]
    pub scale: Scale,
    /// Metrics CSV path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| SorError::config(format!("unknown {what} '{s}'")))
}

/// The config file (if any) with inline flags applied on top.
pub fn resolve_config(args: &FitArgs) -> Result<FitConfig> {
    let mut c = match (&args.config, &args.family) {
        (Some(p), _) => FitConfig::from_path(p)?,
        (None, Some(f)) => FitConfig::skeleton(parse_enum("family", f)?),
        (None, None) => return Err(SorError::config("give --config or at least --family")),
    };
    if let Some(f) = &args.family {
        c.family = parse_enum::<FamilyKind>("family", f)?;
    }
    if let Some(e) = &args.estimator {
        c.estimator = parse_enum("estimator", e)?;
    }
    for (slot, flag) in [(&mut c.response, &args.response), (&mut c.id, &args.id), (&mut c.time, &args.time), (&mut c.aux, &args.aux)] {
        if let Some(v) = flag {
            *slot = v.clone();
        }
    }
    for (slot, flag) in [(&mut c.mean, &args.mean), (&mut c.w1, &args.w1), (&mut c.w2, &args.w2), (&mut c.design.strata, &args.strata)] {
        if let Some(v) = flag {
            *slot = split_list(v);
        }
    }
    if let Some(h) = &args.h {
        c.h = parse_h_flag(h)?;
    }
    if let Some(w) = &args.working {
        c.working = parse_enum("working correlation", w)?;
    }
    if args.y0.is_some() {
        c.y0 = args.y0;
    }
    if args.no_interference {
        c.no_interference = true;
    }
    if let Some(l) = &args.level {
        c.design.level = parse_enum("design level", l)?;
    }
    if let Some(r) = &args.ratio {
        c.design.ratio = Some(parse_ratio_flag(r)?);
        c.design.probs = None;
    }
    if let Some(p) = &args.probs {
        c.design.probs = Some(parse_probs_flag(p)?);
        if args.ratio.is_none() {
            c.design.ratio = None;
        }
    }
    c.validate()?;
    Ok(c)
}

fn parse_scales(s: Option<&str>) -> Result<Vec<f64>> {
    let Some(s) = s else { return Ok(vec![1.0]) };
    let v = split_list(s)
        .iter()
        .map(|x| match x.parse::<f64>() {
            Ok(c) if c > 0.0 && c.is_finite() => Ok(c),
            _ => Err(SorError::config(format!("ratio scale '{x}' is not a positive number"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(SorError::config("--ratio-scale needs at least one value"));
    }
    Ok(v)
}

/// Runs the configured fit(s) and assembles the result document.
pub fn run_fit(config: &FitConfig, data: &Path, ratio_scales: &[f64], exp: bool) -> Result<ResultDocument> {
    if config.estimator != Estimator::Sor && ratio_scales.iter().any(|&c| c != 1.0) {
        return Err(SorError::config(format!("--ratio-scale applies to the sor estimator, not '{}'", config.estimator)));
    }
    let loaded = read_long_csv(data, config)?;
    let base = config.design.build()?;
    let spec = config.frame_spec();
    let opts = config.fit_options();
    let mut fits = Vec::with_capacity(ratio_scales.len());
    for &c in ratio_scales {
        let design = if c == 1.0 { base.clone() } else { base.ratio_scaled(c) };
        let frame = ModelFrame::build(&loaded.dataset, &spec, &design)?;
        fits.push(match config.estimator {
            Estimator::Sor => FitResult::from_sor(&fit_sor(&frame, &opts)?, c, exp),
            Estimator::Naive => FitResult::from_comparator(&fit_naive(&frame, &opts)?, Estimator::Naive, exp),
            Estimator::Ipw => FitResult::from_comparator(&fit_ipw(&frame, &opts)?, Estimator::Ipw, exp),
        });
    }
    Ok(ResultDocument {
        software: Software::current(),
        input: InputInfo {
            path: data.display().to_string(),
            sha256: loaded.sha256,
            n_subjects: loaded.dataset.n_subjects(),
            n_obs: loaded.dataset.n_obs(),
        },
        config: config.clone(),
        fits,
    })
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| SorError::Io(std::io::Error::new(e.kind(), format!("cannot write '{}': {e}", p.display())))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Exit status for an error: 2 for numerical or estimation failure, 1 otherwise.
pub fn exit_code(e: &SorError) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let config = resolve_config(args)?;
    let scales = parse_scales(args.ratio_scale.as_deref())?;
    let doc = run_fit(&config, &args.data, &scales, args.exp)?;
    write_output(args.out.as_deref(), doc.to_json()?.as_bytes())?;
    if let Some(p) = &args.estimates_csv {
        let mut buf = Vec::new();
        doc.write_estimates_csv(&mut buf)?;
        write_output(Some(p), &buf)?;
    }
    let mut code = 0;
    for f in doc.fits.iter().filter(|f| !f.convergence.converged || f.convergence.aux_converged == Some(false)) {
        eprintln!(
            "warning: {} fit at ratio scale {} did not converge ({} iterations, |U| = {:e})",
            f.estimator, f.ratio_scale, f.convergence.iterations, f.convergence.beta_score_norm
        );
        code = 2;
    }
    Ok(code)
}

/// The scenarios selected by `simulate` flags, with overrides applied.
pub fn resolve_scenarios(args: &SimulateArgs) -> Result<Vec<SimScenario>> {
    let mut scenarios = match (&args.preset, &args.scenario) {
        (Some(name), None) => preset(name, args.scale == Scale::Full)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SorError::config(format!("cannot read scenario '{}': {e}", path.display())))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| SorError::config(format!("invalid scenario file: {e}")))?;
            let list = if value.is_array() { value } else { serde_json::Value::Array(vec![value]) };
            serde_json::from_value(list).map_err(|e| SorError::config(format!("invalid scenario file: {e}")))?
        }
        _ => return Err(SorError::config("give exactly one of --preset or --scenario")),
    };
    for s in &mut scenarios {
        if let Some(r) = args.replicates {
            s.replicates = r;
        }
        if let Some(seed) = args.seed {
            s.seed = seed;
        }
        s.validate()?;
    }
    Ok(scenarios)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| SorError::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| SorError::config(format!("cannot start worker threads: {e}")))
}

pub fn run_simulation(scenarios: &[SimScenario]) -> Result<MetricsTable> {
    let pool = thread_pool()?;
    let mut table = MetricsTable::default();
    for s in scenarios {
        table.extend(pool.install(|| run_scenario(s))?);
    }
    Ok(table)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let scenarios = resolve_scenarios(args)?;
    let table = run_simulation(&scenarios)?;
    write_output(args.out.as_deref(), table.to_csv_string()?.as_bytes())?;
    if !table.failures.is_empty() {
        eprintln!("{} replicate fits failed and were excluded:", table.failures.len());
        for (design, est, msg) in table.failures.iter().take(10) {
            eprintln!("  {design} {est}: {msg}");
        }
    }
    Ok(0)
}

pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Version => {
            println!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        if let SorError::Estimation { last_iterate, .. } = &e {
            if !last_iterate.is_empty() {
                eprintln!("last iterate: {last_iterate:?}");
            }
        }
        exit_code(&e)
    })
}
