//! The `bikeflow` command line.
//!
//! Every subcommand reads its inputs from files, writes data to files or
//! stdout and diagnostics to stderr. Exit status is 0 on success, 1 on a
//! usage error and 2 on a data error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod export;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub(crate) fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "bikeflow", version, about = "Bike-share occupancy analytics")]
pub struct Cli {
    /// `key = value` file overriding the pipeline defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Append a directory of KML status documents to a snapshot store.
    Ingest(IngestArgs),
    /// Check every snapshot of a store against capacity limits.
    Validate(ValidateArgs),
    /// Average daily cycle of one station or of the whole network.
    Cycles(CyclesArgs),
    /// Interpolated map of the change in bikes between two times of day.
    Geopattern(GeopatternArgs),
    /// Two-stage clustering of station weekday cycles.
    Cluster(ClusterArgs),
    /// Forecast one station's bikes at an offset from an issue time.
    Predict(PredictArgs),
    /// Forecast error of every model against held-out days.
    EvalPredict(EvalPredictArgs),
    /// Fit the transition model on a time window and list the likely routes.
    Routes(RoutesArgs),
    /// Generate a synthetic network, its snapshots and its trips.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of `*.kml` files named by their UTC timestamp,
    /// e.g. `2008-05-15T12-00-00Z.kml`.
    #[arg(long, value_name = "DIR")]
    pub kml_dir: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// `min_capacity`, `max_capacity`, `max_total_bikes` as `key = value`.
    #[arg(long, value_name = "FILE")]
    pub limits: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CyclesArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    #[arg(long, conflicts_with = "global", required_unless_present = "global")]
    pub station: Option<String>,
    /// Cycle of the city-wide bike total.
    #[arg(long)]
    pub global: bool,
    /// all, weekday, weekend, or a day name (mon..sun).
    #[arg(long, default_value = "weekday")]
    pub day_class: String,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeopatternArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    #[arg(long, value_name = "HH:MM")]
    pub time: String,
    /// Defaults to the configured baseline time (05:00).
    #[arg(long, value_name = "HH:MM")]
    pub baseline: Option<String>,
    #[arg(long, default_value = "100x100", value_name = "ROWSxCOLS")]
    pub grid: String,
    #[arg(long, default_value = "weekday")]
    pub day_class: String,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Number of stage-one clusters, or `auto`.
    #[arg(long, default_value = "auto")]
    pub k: String,
    /// Range searched by `--k auto`, e.g. `2-40`.
    #[arg(long, default_value = "2-40", value_name = "MIN-MAX")]
    pub k_range: String,
    #[arg(long, default_value_t = 7)]
    pub meta_k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out_geojson: Option<PathBuf>,
    /// k-selection curve, when `--k auto`.
    #[arg(long, value_name = "FILE")]
    pub out_curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    #[arg(long)]
    pub station: String,
    /// Issue time, ISO-8601 UTC.
    #[arg(long, value_name = "TIME")]
    pub at: String,
    /// Minutes ahead.
    #[arg(long, value_name = "MIN")]
    pub offset: i64,
    /// persistence, or a cycle scheme: all-other-days, same-weekday, weekday-weekend.
    #[arg(long, default_value = "same-weekday")]
    pub scheme: String,
}

#[derive(Debug, Args)]
pub struct EvalPredictArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Comma-separated minutes.
    #[arg(long, default_value = "10,20,30,60,120,240")]
    pub offsets: String,
    /// Comma-separated cycle schemes for the gradient model.
    #[arg(long, default_value = "all-other-days,same-weekday,weekday-weekend")]
    pub schemes: String,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoutesArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Defaults to the configured morning window (05:00-12:00).
    #[arg(long, value_name = "HH:MM-HH:MM")]
    pub window: Option<String>,
    #[arg(long, default_value = "weekday")]
    pub day_class: String,
    /// Defaults to the configured route threshold (0.03).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out_geojson: Option<PathBuf>,
    /// Fit diagnostics and predicted versus actual final counts.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    pub stations: usize,
    #[arg(long, default_value_t = 28)]
    pub days: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "2008-05-19", value_name = "YYYY-MM-DD")]
    pub start: String,
    /// Trip-rate CSV; defaults to the built-in commuter schedule.
    #[arg(long, value_name = "FILE")]
    pub schedule: Option<PathBuf>,
    /// Scales the built-in schedule.
    #[arg(long, default_value_t = 1.0)]
    pub intensity: f64,
    /// Demand jitter, dropout and truck probability, each in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, value_name = "FILE")]
    pub out_store: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out_trips: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out_schedule: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
