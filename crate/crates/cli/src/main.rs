//! `skyfix` command-line tool: generate, mask, sync, localize and score.
//!
//! Every subcommand reads an optional flat TOML config (`--config`); flags
//! given on the command line win over file values. Logs go to stderr.
//! Exit codes: 0 success, 1 usage, 2 data integrity, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;

use skyfix::clocksync::SyncState;
use skyfix::dataio::{self, MeasurementSet, SensorTable};
use skyfix::exec::Execution;
use skyfix::pipeline::{self, PipelineConfig, PipelineError};
use skyfix::synth;

#[derive(Parser, Debug)]
#[command(name = "skyfix", version, about = "Aircraft localization from crowdsourced time-of-arrival data")]
struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scenario (sensors, measurements, truth clocks).
    Generate(GenerateArgs),
    /// Hide the positions of a fraction of flights.
    Mask(MaskArgs),
    /// Synchronize receiver clocks and write the sync state.
    Sync(SyncArgs),
    /// Localize the masked records and write a submission.
    Localize(LocalizeArgs),
    /// Score a submission against withheld truth.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "sensors")]
    n_sensors: Option<usize>,
    #[arg(long = "flights")]
    n_flights: Option<usize>,
    #[arg(long)]
    fraction_gps: Option<f64>,
    /// Timing noise of the generated receptions, ns.
    #[arg(long)]
    noise_ns: Option<f64>,
    #[arg(long)]
    duration_s: Option<f64>,
    /// Existing directory that receives the scenario files.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long = "sensors-file", value_name = "PATH")]
    sensors: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    measurements: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    masked: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    mask_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SyncArgs {
    #[arg(long = "sensors-file", value_name = "PATH")]
    sensors: Option<PathBuf>,
    /// Measurement file to synchronize on (default: the masked file).
    #[arg(long, value_name = "PATH")]
    masked: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    sync_state: Option<PathBuf>,
    #[arg(long)]
    sigma_ns: Option<f64>,
    #[arg(long)]
    core_size: Option<usize>,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long = "sensors-file", value_name = "PATH")]
    sensors: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    masked: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    sync_state: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    submission: Option<PathBuf>,
    /// `l1` or `ls`.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    coverage_target: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long = "sensors-file", value_name = "PATH")]
    sensors: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    masked: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    submission: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    score_report: Option<PathBuf>,
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    coverage_target: Option<f64>,
    /// `2d` or `3d`.
    #[arg(long)]
    metric: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses a flag through the same names the config file uses.
fn parse_named<T: DeserializeOwned>(flag: &str, value: Option<String>) -> Result<Option<T>, PipelineError> {
    value
        .map(|v| serde_json::from_value(serde_json::Value::String(v.clone())).map_err(|_| PipelineError::usage("arguments", format!("invalid value '{v}' for --{flag}"))))
        .transpose()
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::usage("config", format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)
        }
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, cli: &Cli) -> Result<(), PipelineError> {
    set(&mut cfg.threads, cli.threads.map(Some));
    match &cli.command {
        Command::Generate(a) => {
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.n_sensors, a.n_sensors);
            set(&mut cfg.n_flights, a.n_flights);
            set(&mut cfg.fraction_gps, a.fraction_gps);
            set(&mut cfg.noise_ns, a.noise_ns);
            set(&mut cfg.duration_s, a.duration_s);
            set(&mut cfg.output_dir, a.output_dir.clone());
        }
        Command::Mask(a) => {
            set(&mut cfg.sensors, a.sensors.clone());
            set(&mut cfg.measurements, a.measurements.clone());
            set(&mut cfg.masked, a.masked.clone());
            set(&mut cfg.truth, a.truth.clone());
            set(&mut cfg.mask_fraction, a.mask_fraction);
            set(&mut cfg.mask_seed, a.mask_seed);
        }
        Command::Sync(a) => {
            set(&mut cfg.sensors, a.sensors.clone());
            set(&mut cfg.masked, a.masked.clone());
            set(&mut cfg.sync_state, a.sync_state.clone());
            set(&mut cfg.sigma_ns, a.sigma_ns);
            set(&mut cfg.core_size, a.core_size);
        }
        Command::Localize(a) => {
            set(&mut cfg.sensors, a.sensors.clone());
            set(&mut cfg.masked, a.masked.clone());
            set(&mut cfg.sync_state, a.sync_state.clone());
            set(&mut cfg.submission, a.submission.clone());
            set(&mut cfg.solver, parse_named("solver", a.solver.clone())?);
            set(&mut cfg.coverage_target, a.coverage_target);
        }
        Command::Score(a) => {
            set(&mut cfg.sensors, a.sensors.clone());
            set(&mut cfg.masked, a.masked.clone());
            set(&mut cfg.truth, a.truth.clone());
            set(&mut cfg.submission, a.submission.clone());
            set(&mut cfg.score_report, a.score_report.clone());
            set(&mut cfg.truncation, a.truncation);
            set(&mut cfg.coverage_target, a.coverage_target);
            set(&mut cfg.metric, parse_named("metric", a.metric.clone())?);
        }
    }
    cfg.validate()
}

fn configure_threads(threads: Option<usize>) -> Result<(), PipelineError> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::usage("threads", e.to_string()))?;
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some_and(|n| n > 1) {
        warn!("built without the parallel feature; --threads ignored");
    }
    Ok(())
}

fn load_set(cfg: &PipelineConfig, measurements: &Path, stage: &'static str) -> Result<MeasurementSet, PipelineError> {
    let sensors: SensorTable = dataio::load_sensors(&cfg.sensors).map_err(|e| PipelineError::from_data(stage, e))?;
    let loaded = dataio::load_measurements(measurements, &sensors).map_err(|e| PipelineError::from_data(stage, e))?;
    if loaded.dropped_receptions > 0 {
        warn!(
            "{stage}: dropped {} receptions from unknown sensors ({} records left empty)",
            loaded.dropped_receptions, loaded.dropped_records
        );
    }
    Ok(loaded.set)
}

fn require_parent(path: &Path, stage: &'static str) -> Result<(), PipelineError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(PipelineError::usage(stage, format!("output directory {} does not exist", parent.display())))
    }
}

fn cmd_generate(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if !cfg.output_dir.is_dir() {
        return Err(PipelineError::usage("generate", format!("output directory {} does not exist", cfg.output_dir.display())));
    }
    let scenario = synth::generate_scenario(&cfg.scenario()).map_err(|e| PipelineError::from_synth("generate", e))?;
    synth::write_scenario(&scenario, &cfg.output_dir).map_err(|e| PipelineError::from_synth("generate", e))?;
    info!(
        "generate: {} sensors, {} records written to {}",
        scenario.set.sensors.len(),
        scenario.set.records.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_mask(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    require_parent(&cfg.masked, "mask")?;
    require_parent(&cfg.truth, "mask")?;
    let set = load_set(cfg, &cfg.measurements, "mask")?;
    let (masked, truth) = dataio::mask_flights(&set, cfg.mask_fraction, cfg.mask_seed).map_err(|e| PipelineError::from_data("mask", e))?;
    dataio::write_measurements(&masked, &cfg.masked).map_err(|e| PipelineError::from_data("mask", e))?;
    dataio::write_predictions(&truth, &cfg.truth).map_err(|e| PipelineError::from_data("mask", e))?;
    info!("mask: {} of {} records masked", truth.len(), set.records.len());
    Ok(())
}

fn cmd_sync(cfg: &PipelineConfig, exec: Execution) -> Result<(), PipelineError> {
    require_parent(&cfg.sync_state, "sync")?;
    let set = load_set(cfg, &cfg.masked, "sync")?;
    let (state, report) = pipeline::run_sync(&set, cfg, exec)?;
    state.save(&cfg.sync_state).map_err(|e| PipelineError::from_data("sync", e))?;
    info!(
        "sync: core of {} (median residual {:.1} ns), {} synchronized, {} excluded, {} pending",
        report.core.len(),
        report.core_residual_median_ns,
        report.synchronized,
        report.excluded,
        report.pending
    );
    Ok(())
}

fn cmd_localize(cfg: &PipelineConfig, exec: Execution) -> Result<(), PipelineError> {
    require_parent(&cfg.submission, "localize")?;
    let set = load_set(cfg, &cfg.masked, "localize")?;
    let text = std::fs::read_to_string(&cfg.sync_state)
        .map_err(|e| PipelineError::usage("localize", format!("{}: {e}", cfg.sync_state.display())))?;
    let state = SyncState::from_json(&text).map_err(|e| PipelineError::from_sync("localize", e))?;
    let loc = pipeline::run_localize(&set, &state, cfg, exec);
    dataio::write_submission(&loc.predictions, &set, &cfg.submission).map_err(|e| PipelineError::from_data("localize", e))?;
    let s = &loc.stats;
    info!(
        "localize: {} maskable, {} solved, {} filtered, {} screened, {} reconstructed, {} gap-filled, {} emitted",
        s.maskable, s.solved, s.filtered, s.screened, s.reconstructed, s.gap_filled, s.emitted
    );
    Ok(())
}

fn cmd_score(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    require_parent(&cfg.score_report, "score")?;
    let masked = load_set(cfg, &cfg.masked, "score")?;
    let truth = dataio::read_submission(&cfg.truth).map_err(|e| PipelineError::from_data("score", e))?;
    let preds = dataio::read_submission(&cfg.submission).map_err(|e| PipelineError::from_data("score", e))?;
    let report = pipeline::run_score(&preds, &truth, &masked, cfg)?;
    let json = report.to_json();
    dataio::atomic_write(&cfg.score_report, |w| w.write_all(json.as_bytes())).map_err(|e| PipelineError::from_data("score", e))?;
    println!("{}", report.to_text());
    if !report.pass_coverage {
        warn!("score: coverage {:.3} below the target {:.3}", report.coverage, cfg.coverage_target);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, cli)?;
    configure_threads(cfg.threads)?;
    let exec = Execution::Parallel;
    match cli.command {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Mask(_) => cmd_mask(&cfg),
        Command::Sync(_) => cmd_sync(&cfg, exec),
        Command::Localize(_) => cmd_localize(&cfg, exec),
        Command::Score(_) => cmd_score(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().target(env_logger::Target::Stderr).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
