//! Batch command-line surface: generate synthetic benchmarks, train the
//! Y-model jointly, enhance WAVs with optional test-time training, and run
//! the full strategy evaluation matrix.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! `TTSE_LOG=quiet|info|debug` controls stderr chatter (default info).

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ttse", version, about = "Speech enhancement with test-time training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (or the stock source/shifted benchmark).
    GenData {
        /// JSON domain spec or benchmark spec; stock benchmark when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Mixed into every per-utterance seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model jointly on the main and self-supervised objectives.
    Train {
        /// msp | nytt-gaussian | nytt-real
        #[arg(long)]
        task: Option<String>,
        /// Dataset directory (manifest.jsonl + clean/ + noisy/)
        #[arg(long)]
        data: PathBuf,
        /// JSON file mirroring the training config; flags override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra WAV directory merged into the NyTT-real noise bank
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Enhance a WAV file or directory, optionally with test-time training.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input WAV file or directory of WAVs
        #[arg(long = "in", value_name = "WAV|DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// standalone | online | online-batch | online-batch-bias
        #[arg(long)]
        ttt: Option<String>,
        #[arg(long)]
        ttt_lr: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = false)]
        bias_only: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Run the full matrix: noisy / joint / four TTT strategies on the
    /// shifted set, then source re-evaluation of each adapted state.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source-domain dataset directory
        #[arg(long)]
        source: PathBuf,
        /// Shifted-domain dataset directory
        #[arg(long)]
        shifted: PathBuf,
        /// Comma-separated strategy list (default: all four)
        #[arg(long)]
        strategies: Option<String>,
        /// CSV report path
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ttt_lr: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    use ttse::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(
            Error::Io(_)
            | Error::Wav(_)
            | Error::Json(_)
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Geometry(_)
            | Error::TooShort { .. }
            | Error::Topology(_),
        ) => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let result = match cli.command {
        Command::GenData { spec, out, seed } => commands::gen_data(spec, out, seed),
        Command::Train { task, data, config, out, epochs, batch, lr, seed, noise_dir } => {
            commands::train(task, data, config, out, epochs, batch, lr, seed, noise_dir)
        }
        Command::Enhance { ckpt, input, out, ttt, ttt_lr, window, bias_only, steps, seed, noise_dir } => {
            commands::enhance(ckpt, input, out, ttt, ttt_lr, window, bias_only, steps, seed, noise_dir)
        }
        Command::Eval { ckpt, source, shifted, strategies, report, ttt_lr, window, steps, seed, noise_dir } => {
            commands::eval(ckpt, source, shifted, strategies, report, ttt_lr, window, steps, seed, noise_dir)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
