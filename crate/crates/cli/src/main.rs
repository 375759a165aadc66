//! `spoofcl` command-line interface.

mod augspec;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "spoofcl", version, about = "Two-stage contrastive spoofing countermeasure")]
struct Cli {
    /// Worker threads for feature extraction and per-sample gradients
    /// (0 uses every core). Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Log filter, e.g. `info`, `debug` or `spoofcl=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run configuration (JSON). Relative paths inside it are resolved
    /// against the file's directory.
    #[arg(long)]
    pub config: PathBuf,

    /// `dotted.key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive Siamese training of the encoder.
    TrainStage1 {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Classifier training on top of a Stage I encoder.
    TrainStage2 {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stage I checkpoint; a randomly initialized encoder when omitted.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Scores a manifest and prints the EER.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Writes pre-projection representations as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Applies one waveform augmentation to a WAV file.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `name[:value[,value]]`, e.g. `pitch_shift:12` or `narrowband_fir:300,3400`.
        #[arg(long)]
        aug: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints the default run configuration.
    DefaultConfig,
    /// Generates the deterministic synthetic corpus.
    #[command(hide = true)]
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        min_seconds: f64,
        #[arg(long, default_value_t = 2.0)]
        max_seconds: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let workers = cli.workers;
    let result = spoofcl::parallel::with_workers(workers, move || commands::run(cli.command, workers));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
