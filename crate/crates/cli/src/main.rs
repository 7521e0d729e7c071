use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

/// Profile, trace, run and check recursive gated-convolution keypoint detectors.
#[derive(Parser, Debug)]
#[command(name = "drsi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameters and multiply-accumulates; the last line holds the totals.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input_size: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Shapes of every named value for a square input.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input_size: usize,
    },
    /// Runs the network on a raw f32 NCHW tensor and writes COCO-style detections.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Headerless little-endian f32 file.
        #[arg(long)]
        image: PathBuf,
        /// Tensor dims as N,C,H,W.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf_threshold: f64,
        #[arg(long, default_value_t = 0.65)]
        iou_threshold: f64,
    },
    /// Keypoint AP/AR of a COCO result file against COCO annotations.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// TOML file with `sigmas = [...]`; defaults to the COCO constants.
        #[arg(long)]
        sigmas: Option<PathBuf>,
    },
    /// Finite-difference gradient checks, all or those matching a name or prefix.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs every acceptance property and reports one line each.
    Selftest,
    /// Writes a seeded model's weights to an archive.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn seed_from_env() -> Result<u64, CliError> {
    match std::env::var("DRSI_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| CliError::Usage(format!("DRSI_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let seed = seed_from_env()?;
    match cli.command {
        Command::Profile { config, input_size, format } => commands::profile(&config, input_size, seed, matches!(format, Format::Json)),
        Command::Trace { config, input_size } => commands::trace(&config, input_size, seed),
        Command::Forward { config, weights, image, dims, out, conf_threshold, iou_threshold } => {
            commands::forward(&config, &weights, &image, &dims, &out, seed, conf_threshold, iou_threshold)
        }
        Command::Eval { gt, pred, sigmas } => commands::eval(&gt, &pred, sigmas.as_deref()),
        Command::Gradcheck { module, seed: flag } => commands::gradcheck(module.as_deref(), flag.unwrap_or(seed)),
        Command::Selftest => commands::selftest(seed),
        Command::Init { config, out } => commands::init(&config, &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
