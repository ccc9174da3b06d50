//! Command-line subcommands. Each writes its outputs plus `manifest.json`
//! recording everything needed to rerun it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::engine::{gelman_rubin, monitored_parameters, run_chains, trace_export, ChainConfig, ModelVariant};
use crate::error::Error;
use crate::fitfile::{read_fit, write_fit};
use crate::outcome::ModelContext;
use crate::pipeline::{
    generate_cohort, load_cohort, read_json, widen_intervals, write_generated, write_json, GeneratorConfig,
};
use crate::summaries::{summarize_fit, write_report, SummaryOptions};
use crate::types::{validate_cohort, Hyperparams};

pub const FIT_FILE: &str = "fit.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "dicjm",
    version,
    about = "Joint model for doubly interval-censored durations and longitudinal outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with its ground truth.
    Simulate(SimulateArgs),
    /// Run the MCMC sampler on a cohort directory.
    Fit(FitArgs),
    /// Compute posterior summaries from a fit file.
    Summarize(SummarizeArgs),
    /// Convergence diagnostics and trace export.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generator configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Intervals {
    #[default]
    Narrow,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Joint,
    Marginal,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Fit configuration (JSON) with optional `chain`, `hyper`, `intervals`, `global_left`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub intervals: Option<Intervals>,
    /// Common H left endpoint used by `--intervals wide` (days).
    #[arg(long)]
    pub global_left: Option<f64>,
    /// Dirichlet-process precisions as `ALPHA_H,ALPHA_W`.
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<(f64, f64)>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Directory for per-iteration latent-state dumps.
    #[arg(long)]
    pub dump_latent: Option<PathBuf>,
}

fn parse_alpha(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts[..] else {
        return Err(format!("expected ALPHA_H,ALPHA_W, got `{s}`"));
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("not a number: `{x}`"));
    let (a, b) = (num(a)?, num(b)?);
    if a > 0.0 && b > 0.0 {
        Ok((a, b))
    } else {
        Err("precisions must be positive".into())
    }
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Summary options (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hazard grid cell width in days.
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Percentiles of pooled imputations instead of per-iteration percentiles.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fit configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FitConfig {
    pub chain: ChainConfig,
    pub hyper: Hyperparams,
    pub intervals: Intervals,
    pub global_left: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_config: Option<ChainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_config: Option<GeneratorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyperparams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Intervals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_left: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary_options: Option<SummaryOptions>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.into(),
            config_path: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            chain_config: None,
            generator_config: None,
            hyper: None,
            intervals: None,
            global_left: None,
            summary_options: None,
            notes: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn write(&mut self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        self.outputs.push(path.clone());
        write_json(&path, self).map_err(CliError::runtime)
    }
}

/// An error with the process exit code it maps to: 2 for usage or
/// configuration problems, 1 for failures while running.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl CliError {
    fn usage(error: Error) -> Self {
        Self { code: 2, error }
    }

    fn runtime(error: Error) -> Self {
        Self { code: 1, error }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        Some(p) => read_json(p).map_err(CliError::usage),
        None => Ok(T::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::runtime(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Summarize(a) => cmd_summarize(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config: GeneratorConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::usage)?;
    let (subjects, meta, truth) = generate_cohort(&config).map_err(CliError::runtime)?;
    ensure_dir(&args.out)?;
    let outputs = write_generated(&args.out, &subjects, &meta, &truth).map_err(CliError::runtime)?;
    let mut manifest = RunManifest::new("simulate");
    manifest.config_path = args.config.clone();
    manifest.outputs = outputs;
    manifest.seed = Some(config.seed);
    manifest.generator_config = Some(config);
    manifest.write(&args.out)
}

/// Resolves the fit configuration: file values, then flag overrides.
pub fn resolve_fit_config(args: &FitArgs) -> Result<FitConfig, CliError> {
    let mut cfg: FitConfig = load_config(args.config.as_deref())?;
    let chain = &mut cfg.chain;
    if let Some(v) = args.variant {
        chain.variant = match v {
            VariantArg::Joint => ModelVariant::Joint,
            VariantArg::Marginal => ModelVariant::Marginal,
        };
    }
    if let Some((a, b)) = args.alpha {
        chain.alpha_h = a;
        chain.alpha_w = b;
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(x) = $flag {
                $field = x;
            }
        };
    }
    set!(args.seed, chain.seed);
    set!(args.n_iter, chain.n_iter);
    set!(args.burn_in, chain.burn_in);
    set!(args.chains, chain.n_chains);
    set!(args.thin, chain.thin);
    chain.latent_dump = args.dump_latent.clone();
    set!(args.intervals, cfg.intervals);
    if args.global_left.is_some() {
        cfg.global_left = args.global_left;
    }
    cfg.chain.validate().map_err(CliError::usage)?;
    cfg.hyper.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let cfg = resolve_fit_config(args)?;
    let (mut subjects, meta) = load_cohort(&args.cohort).map_err(CliError::usage)?;
    let mut hyper = cfg.hyper.clone();
    hyper.max_followup = meta.max_followup;
    let global_left = (cfg.intervals == Intervals::Wide).then(|| cfg.global_left.unwrap_or(0.0));
    if let Some(left) = global_left {
        subjects = widen_intervals(&subjects, left).map_err(CliError::usage)?;
    }
    let cohort = validate_cohort(subjects, &hyper).map_err(CliError::usage)?;
    let ctx = ModelContext::new(cohort, hyper.clone()).map_err(CliError::usage)?;
    let draws = run_chains(&ctx, &cfg.chain, args.threads).map_err(CliError::runtime)?;
    ensure_dir(&args.out)?;
    let fit_path = args.out.join(FIT_FILE);
    write_fit(&fit_path, &ctx, &draws).map_err(CliError::runtime)?;
    let mut manifest = RunManifest::new("fit");
    manifest.config_path = args.config.clone();
    manifest.inputs = vec![args.cohort.clone()];
    manifest.outputs = vec![fit_path];
    manifest.seed = Some(cfg.chain.seed);
    manifest.chain_config = Some(cfg.chain);
    manifest.hyper = Some(hyper);
    manifest.intervals = Some(cfg.intervals);
    manifest.global_left = global_left;
    manifest.write(&args.out)
}

pub fn cmd_summarize(args: &SummarizeArgs) -> Result<(), CliError> {
    let mut options: SummaryOptions = load_config(args.config.as_deref())?;
    if let Some(step) = args.grid_step {
        options.hazard_step = step;
    }
    options.pooled_percentiles |= args.pooled;
    let fit = read_fit(&args.fit).map_err(|e| match e {
        Error::Io { .. } => CliError::usage(e),
        other => CliError::runtime(other),
    })?;
    let report = summarize_fit(&fit.draws, &fit.context, &options).map_err(CliError::runtime)?;
    let outputs = write_report(&args.out, &report).map_err(CliError::runtime)?;
    let mut manifest = RunManifest::new("summarize");
    manifest.config_path = args.config.clone();
    manifest.inputs = vec![args.fit.clone()];
    manifest.outputs = outputs;
    manifest.seed = Some(fit.draws.config.seed);
    manifest.summary_options = Some(options);
    manifest.write(&args.out)
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let fit = read_fit(&args.fit).map_err(|e| match e {
        Error::Io { .. } => CliError::usage(e),
        other => CliError::runtime(other),
    })?;
    let draws = &fit.draws;
    ensure_dir(&args.out)?;
    let params = monitored_parameters(&draws.layout);
    let trace = args.out.join("trace.csv");
    trace_export(draws, &params, &trace).map_err(CliError::runtime)?;
    let mut manifest = RunManifest::new("diagnose");
    manifest.inputs = vec![args.fit.clone()];
    manifest.outputs = vec![trace];
    manifest.seed = Some(draws.config.seed);
    if draws.chains.len() < 2 {
        let note = "single chain: R-hat skipped, traces only".to_string();
        log::warn!("{note}");
        manifest.notes.push(note);
    } else {
        let path = args.out.join("rhat.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::runtime(e.into()))?;
        w.write_record(["parameter", "rhat", "zero_variance"])
            .map_err(|e| CliError::runtime(e.into()))?;
        for p in &params {
            let col = draws.layout.column_index(p).map_err(CliError::runtime)?;
            let record = match gelman_rubin(&draws.chain_column(col)) {
                Ok(r) => [p.clone(), r.value.to_string(), r.zero_variance.to_string()],
                Err(e) => {
                    manifest.notes.push(format!("{p}: R-hat skipped ({e})"));
                    [p.clone(), String::new(), String::new()]
                }
            };
            w.write_record(record).map_err(|e| CliError::runtime(e.into()))?;
        }
        w.flush().map_err(|e| {
            CliError::runtime(Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        manifest.outputs.push(path);
    }
    manifest.write(&args.out)
}
