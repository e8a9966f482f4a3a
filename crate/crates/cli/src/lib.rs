//! `mcbw`: offline pipeline stages and the HTTP server.
//!
//! Progress goes to stderr through `tracing`; each stage writes its manifest
//! as one JSON line to the given stdout. Failures surface as [`CliError`],
//! which the binary prints as one JSON line on stderr before exiting with 2
//! (missing input), 3 (validation failure) or 1 (runtime failure).

mod commands;
mod config;
mod error;
mod manifest;

pub use error::{CliError, CliResult, EXIT_INVALID, EXIT_MISSING, EXIT_RUNTIME};
pub use manifest::{Manifest, MANIFEST_FILE};

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};


#[derive(Debug, Parser)]
#[command(name = "mcbw", version, about = "Cloud-intervention emulation workbench")]
struct Cli {
    /// JSON config file with one section per subcommand; flags win over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic raw dataset.
    Synth(SynthArgs),
    /// Turn a raw dataset into anomalies.
    Preprocess(PreprocessArgs),
    /// Train one emulator per lag.
    Train(TrainArgs),
    /// Fit distribution-shift references for the input channels.
    ShiftFit(ShiftFitArgs),
    /// Validation metrics and planted-response recovery for a lag suite.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API over a set of artifacts.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub months: Option<usize>,
    /// Icosahedral refinement level, 0..=5.
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub start_year: Option<i32>,
    #[arg(long)]
    pub start_month: Option<u32>,
    /// Multiplier on every channel's red-noise amplitude; 0 leaves only the
    /// seasonal cycle and trend.
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Planted lagged gain `LAG:OUTPUT:INPUT:GAIN`; repeatable.
    #[arg(long, value_name = "LAG:OUTPUT:INPUT:GAIN")]
    pub planted: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PreprocessArgs {
    /// Raw dataset directory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window_years: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Anomaly dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output suite directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lags: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub lr_decay_per_epoch: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lambda_precip: Option<f64>,
    #[arg(long)]
    pub lambda_moisture: Option<f64>,
    #[arg(long)]
    pub lambda_mass: Option<f64>,
    #[arg(long)]
    pub lambda_energy: Option<f64>,
    #[arg(long)]
    pub c_energy: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ShiftFitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of principal axes.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub ood_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Named region carrying the unit probe perturbation.
    #[arg(long)]
    pub probe_region: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ServeArgs {
    /// Anomaly dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Raw dataset directory, enabling the raw stage.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Shift reference directory.
    #[arg(long)]
    pub shift: Option<PathBuf>,
    /// Intervention record directory; created if absent.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Tipping-site configuration file.
    #[arg(long)]
    pub sites: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

enum Parsed {
    Run(Cli),
    /// `--help` or `--version`, already printed.
    Shown,
}

fn parse<I, T>(argv: I) -> CliResult<Parsed>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Parsed::Run(cli)),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            Ok(Parsed::Shown)
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            Err(CliError { code: "invalid_arguments", ..CliError::invalid(first) })
        }
    }
}

/// Runs one invocation; `argv[0]` is the program name. Machine-readable
/// results go to `stdout`. `serve` only returns when the server stops.
pub fn run_from<I, T>(argv: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let Parsed::Run(cli) = parse(argv)? else { return Ok(()) };
    let file = cli.config.as_deref().map(config::load_file).transpose()?;
    let file = file.as_ref();
    let manifest = match cli.command {
        Command::Synth(a) => commands::synth(config::layered("synth", &a, file)?)?,
        Command::Preprocess(a) => commands::preprocess(config::layered("preprocess", &a, file)?)?,
        Command::Train(a) => commands::train(config::layered("train", &a, file)?)?,
        Command::ShiftFit(a) => commands::shift_fit(config::layered("shift-fit", &a, file)?)?,
        Command::Evaluate(a) => commands::evaluate(config::layered("evaluate", &a, file)?)?,
        Command::Serve(a) => return commands::serve(config::layered("serve", &a, file)?, stdout),
    };
    writeln!(stdout, "{}", serde_json::to_string(&manifest).expect("manifest serializes"))?;
    Ok(())
}
