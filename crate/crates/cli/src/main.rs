//! `xfmnet` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xfmnet::prediction::Split;
use xfmnet::xgatefusion::FusionMode;

use xfmnet_cli::commands;
use xfmnet_cli::config::RunConfig;
use xfmnet_cli::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "xfmnet", version, about = "Multimodal multi-station forecasting: synth, train, eval, diagnose, probe")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "XFMNET_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    series_csv: Option<PathBuf>,
    #[arg(long, global = true)]
    image_blob: Option<PathBuf>,
    /// Directory with series.csv and images.bin; explicit paths win.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-station dataset.
    Synth {
        #[arg(long)]
        stations: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        rain_amplitude: Option<f64>,
    },
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        eval_stride: Option<usize>,
    },
    /// Periodogram, band envelopes, autocorrelation and volatility of each station.
    Diagnose {
        /// Also render SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Export fusion-stage correlations and activations for one window.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    train_stride: Option<usize>,
    #[arg(long)]
    eval_stride: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    match s {
        "gated" => Ok(FusionMode::Gated),
        "mean" => Ok(FusionMode::Mean),
        _ => Err(format!("unknown fusion mode {s:?}; expected gated or mean")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(cli: Cli) -> Result<(RunConfig, Command)> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, c.seed);
    if c.output_dir.is_some() {
        cfg.output_dir = c.output_dir;
    }
    if let Some(dir) = &c.data_dir {
        cfg.series_csv = Some(dir.join("series.csv"));
        cfg.image_blob = Some(dir.join("images.bin"));
    }
    if c.series_csv.is_some() {
        cfg.series_csv = c.series_csv;
    }
    if c.image_blob.is_some() {
        cfg.image_blob = c.image_blob;
    }
    cfg.force |= c.force;
    match &cli.command {
        Command::Synth {
            stations,
            length,
            noise_std,
            rain_amplitude,
        } => {
            set(&mut cfg.synthetic.stations, *stations);
            set(&mut cfg.synthetic.length, *length);
            set(&mut cfg.synthetic.noise_std, *noise_std);
            set(&mut cfg.synthetic.rain_amplitude, *rain_amplitude);
        }
        Command::Train(a) => {
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.patience, a.patience);
            set(&mut cfg.train.train_stride, a.train_stride);
            set(&mut cfg.train.eval_stride, a.eval_stride);
            if a.batches_per_epoch.is_some() {
                cfg.train.batches_per_epoch = a.batches_per_epoch;
            }
            set(&mut cfg.model.fusion, a.fusion);
            set(&mut cfg.model.rounds, a.rounds);
            set(&mut cfg.model.lookback, a.lookback);
            set(&mut cfg.model.horizon, a.horizon);
        }
        Command::Eval {
            checkpoint,
            split,
            eval_stride,
        } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            set(&mut cfg.eval_split, *split);
            set(&mut cfg.train.eval_stride, *eval_stride);
        }
        Command::Diagnose { svg } => cfg.diagnose.svg |= *svg,
        Command::Probe { checkpoint, window } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            if window.is_some() {
                cfg.probe_window = *window;
            }
        }
    }
    Ok((cfg.resolve()?, cli.command))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, command) = build_config(cli)?;
    match command {
        Command::Synth { .. } => commands::synth(cfg),
        Command::Train(_) => commands::train_cmd(cfg),
        Command::Eval { .. } => commands::eval_cmd(cfg),
        Command::Diagnose { .. } => commands::diagnose_cmd(cfg),
        Command::Probe { .. } => commands::probe_cmd(cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
