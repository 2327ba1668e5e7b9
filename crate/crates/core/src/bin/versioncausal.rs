use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use versioncausal::em::EmConfig;
use versioncausal::io::output::{self, ReportFormat};
use versioncausal::io::{self as vio, BootstrapSettings, RunConfig};
use versioncausal::model::VersionStructure;
use versioncausal::sim::{monte_carlo, FitMode, SimConfig};
use versioncausal::{Error, Result};

#[derive(Parser)]
#[command(name = "versioncausal", version, about = "Version-specific causal effects under latent treatment versions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a data file and write estimates.
    Fit(FitArgs),
    /// Run a Monte Carlo study on synthetic data.
    Simulate(SimulateArgs),
    /// Fit and attach percentile bootstrap intervals.
    Bootstrap(BootstrapArgs),
    /// Convert a saved report to another format.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Delimited text file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// TOML file declaring outcome, treatment and covariate columns.
    #[arg(long)]
    roles: PathBuf,
    /// Versions per treatment in label order, e.g. "2,2".
    #[arg(long)]
    versions: String,
    /// Categories at or below this share within any treatment are dropped.
    #[arg(long, default_value_t = 0.05)]
    rare_threshold: f64,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound on the joint propensity in the weights (off by default).
    #[arg(long)]
    floor: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    em: EmArgs,
    /// Number of bootstrap resamples.
    #[arg(long = "B", default_value_t = 100)]
    replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    snr: f64,
    /// Number of treatments.
    #[arg(long)]
    treatments: usize,
    /// Versions per treatment, e.g. "2,2".
    #[arg(long)]
    versions: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Plug in the true parameters instead of fitting.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A report written by `fit` or `bootstrap` (either format).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

fn run_config(data: &DataArgs, em: &EmArgs, out: &Path) -> Result<RunConfig> {
    Ok(RunConfig {
        tol: em.tol,
        max_iter: em.max_iter,
        restarts: em.restarts,
        seed: em.seed,
        floor: em.floor,
        ..RunConfig::new(VersionStructure::parse(&data.versions)?, out)
    })
}

fn fit_and_write(data: &DataArgs, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let roles = vio::Roles::load(&data.roles)?;
    let table = vio::ingest(&data.data, &roles)?;
    let (dataset, prep) = vio::preprocess(&table, data.rare_threshold)?;
    info!(
        "{} rows used ({} dropped for missing values, {} for rare categories), {} covariate columns",
        prep.n_used,
        prep.n_dropped_missing,
        prep.n_dropped_rare,
        dataset.p()
    );
    if cfg.versions.n_treatments() != dataset.n_treatments() {
        return Err(Error::InvalidParameter(format!(
            "--versions lists {} treatments but the data has {} ({})",
            cfg.versions.n_treatments(),
            dataset.n_treatments(),
            prep.treatment_labels.join(", ")
        )));
    }
    let run = vio::run_fit(cfg, &dataset)?;
    vio::write_run(&cfg.out_dir, &run, Some(&prep))?;
    info!("results written to {}", cfg.out_dir.display());
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let versions = VersionStructure::parse(&args.versions)?;
    if versions.n_treatments() != args.treatments {
        return Err(Error::InvalidParameter(format!(
            "--treatments {} but --versions lists {}",
            args.treatments,
            versions.n_treatments()
        )));
    }
    let cfg = SimConfig {
        n: args.n,
        p: args.p,
        versions,
        snr: args.snr,
        reps: args.reps,
        seed: args.seed,
    };
    let mode = if args.oracle {
        FitMode::Oracle
    } else {
        FitMode::Em(EmConfig {
            tol: args.tol,
            max_iter: args.max_iter,
            restarts: args.restarts,
            ..EmConfig::default()
        })
    };
    let result = monte_carlo(&cfg, &mode)?;
    output::write_text(&args.out.join("metrics.csv"), &output::metrics_csv(&result)?)?;
    output::write_text(&args.out.join("replicates.csv"), &output::replicates_csv(&result)?)?;
    let truth = serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "truth": result.truth }))
        .map_err(|e| Error::Internal(e.to_string()))?;
    output::write_text(&args.out.join("truth.json"), &(truth + "\n"))?;
    info!("{} of {} replicates failed; results in {}", result.failures, cfg.reps, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit_and_write(&a.data, &run_config(&a.data, &a.em, &a.out)?),
        Command::Bootstrap(a) => {
            let cfg = RunConfig {
                bootstrap: Some(BootstrapSettings {
                    replicates: a.replicates,
                    level: a.level,
                }),
                ..run_config(&a.data, &a.em, &a.out)?
            };
            fit_and_write(&a.data, &cfg)
        }
        Command::Simulate(a) => simulate(&a),
        Command::Report(a) => {
            let report = vio::read_report(&a.input)?;
            vio::emit_report(&report, a.format, &a.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
