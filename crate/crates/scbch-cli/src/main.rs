//! Experiment runner for noise-robust cross-modal hashing.
//!
//! Every command is driven by one strict TOML config (see `config.rs`);
//! the effective config is copied into the output directory so runs are
//! reproducible from that file alone.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scbch::dataset::FileFormat;
use scbch::error::Error;

use commands::{Printer, SweepAxes};
use config::ExperimentConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "scbch",
    about = "Train and evaluate noise-robust cross-modal hash codes",
    version
)]
struct Cli {
    /// Path to a TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides every section seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Disable an objective component (repeatable):
    /// cscc, bsch, weighting, attraction.
    #[arg(long = "ablate")]
    ablate: Vec<String>,

    /// Override the label-noise rate.
    #[arg(long = "noise-rate")]
    noise_rate: Option<f64>,

    /// Override the hash code length.
    #[arg(long = "code-length")]
    code_length: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file and print a summary.
    Generate,
    /// Train on the dataset file; writes checkpoint, metrics, and weight
    /// histograms.
    Train(TrainFlags),
    /// Evaluate a checkpoint: MAP per direction plus PR curves.
    Eval {
        /// Checkpoint path; defaults to `<out_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// MAP cutoff (0 = full retrieval set).
        #[arg(long = "map-at")]
        map_at: Option<usize>,
    },
    /// Train and evaluate over a grid of axis values; one CSV row per cell.
    Sweep {
        #[arg(long = "noise-rates", value_delimiter = ',')]
        noise_rates: Vec<f64>,
        #[arg(long = "code-lengths", value_delimiter = ',')]
        code_lengths: Vec<usize>,
        /// Ablation axis values: none, cscc, bsch, weighting, attraction.
        #[arg(long = "ablations", value_delimiter = ',')]
        ablations: Vec<String>,
        #[arg(long = "xis", value_delimiter = ',')]
        xis: Vec<f64>,
        #[arg(long = "margins", value_delimiter = ',')]
        margins: Vec<f64>,
        /// Parallel workers; cells stay individually seeded.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export label-similarity and feature-similarity matrices for a
    /// seeded sample subset.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Convert a dataset file between the text and binary formats.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: FileFormat,
    },
}

fn parse_format(s: &str) -> Result<FileFormat, String> {
    match s {
        "text" => Ok(FileFormat::Text),
        "binary" => Ok(FileFormat::Binary),
        other => Err(format!("unknown format `{other}` (expected text or binary)")),
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
        config.apply_master_seed();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let printer = Printer { quiet: cli.quiet };
    let mut config = effective_config(cli)?;
    match &cli.command {
        Command::Generate => commands::cmd_generate(&config, &printer),
        Command::Train(flags) => {
            for name in &flags.ablate {
                let add = commands::parse_ablation(name)?;
                let a = &mut config.train.ablation;
                a.disable_cscc |= add.disable_cscc;
                a.disable_bsch |= add.disable_bsch;
                a.disable_weighting |= add.disable_weighting;
                a.disable_attraction |= add.disable_attraction;
            }
            if let Some(rate) = flags.noise_rate {
                config.noise.rate = rate;
            }
            if let Some(bits) = flags.code_length {
                config.train.code_length = bits;
            }
            commands::cmd_train(&config, &printer)
        }
        Command::Eval { checkpoint, map_at } => {
            if let Some(k) = map_at {
                config.eval.map_at = *k;
            }
            commands::cmd_eval(&config, checkpoint.as_deref(), &printer)
        }
        Command::Sweep {
            noise_rates,
            code_lengths,
            ablations,
            xis,
            margins,
            workers,
        } => {
            let or_default = |axis: &[f64], fallback: f64| {
                if axis.is_empty() {
                    vec![fallback]
                } else {
                    axis.to_vec()
                }
            };
            let axes = SweepAxes {
                noise_rates: or_default(noise_rates, config.noise.rate),
                code_lengths: if code_lengths.is_empty() {
                    vec![config.train.code_length]
                } else {
                    code_lengths.clone()
                },
                ablations: if ablations.is_empty() {
                    vec!["none".to_string()]
                } else {
                    ablations.clone()
                },
                xis: or_default(xis, config.train.xi),
                margins: or_default(margins, config.train.margin),
            };
            commands::cmd_sweep(&config, &axes, *workers, &printer)
        }
        Command::Diagnose {
            checkpoint,
            samples,
        } => commands::cmd_diagnose(&config, checkpoint.as_deref(), *samples, &printer),
        Command::Convert {
            input,
            output,
            format,
        } => commands::cmd_convert(input, output, *format, &printer),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Shape(_) => EXIT_CONFIG,
                Error::Parse { .. } | Error::Io(_) => EXIT_IO,
                Error::Numeric(_) => EXIT_NUMERIC,
            };
            ExitCode::from(code)
        }
    }
}
