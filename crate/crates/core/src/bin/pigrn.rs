use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pigrn::commands::{
    cmd_eval, cmd_predict, cmd_preprocess, cmd_sweep_lambda, cmd_synth, cmd_train, exit_code, EvalArgs,
    PredictArgs, PreprocessArgs, SweepArgs, SynthArgs, TrainArgs,
};

/// Estimate arm kinematics, hand load and joint torques from EMG envelopes.
#[derive(Parser)]
#[command(name = "pigrn", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into an existing directory.
    Synth {
        /// Synthetic dataset spec (TOML); defaults to 12 trials over 0, 2 and 4 kg.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter, normalize and differentiate raw recordings.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on the manifest's training split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Physics loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the manifest's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Normalize %RMSE by the maximum over all test trials.
        #[arg(long)]
        global_max: bool,
    },
    /// Train and evaluate one model per physics loss weight.
    SweepLambda {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated weights; defaults to 1, 0.1, 0.01, 0.05, 0.001, 0.0001.
        #[arg(long = "lambda", value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Predict kinematics and torques for an EMG file of any length.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV whose `emg*` columns are the network inputs.
        #[arg(long)]
        emg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() {
    let Ok(value) = std::env::var("PIGRN_THREADS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring PIGRN_THREADS={value}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    init_threads();

    let result = match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&SynthArgs { config, out, seed }).map(|_| ()),
        Command::Preprocess { manifest, out } => cmd_preprocess(&PreprocessArgs { manifest, out }).map(|_| ()),
        Command::Train {
            config,
            manifest,
            out,
            seed,
            lambda,
            epochs,
        } => cmd_train(&TrainArgs {
            config,
            manifest,
            out,
            seed,
            lambda,
            epochs,
        })
        .map(|_| ()),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            config,
            global_max,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            manifest,
            out,
            config,
            global_max,
        })
        .map(|_| ()),
        Command::SweepLambda {
            config,
            manifest,
            out,
            seed,
            epochs,
            values,
        } => cmd_sweep_lambda(&SweepArgs {
            config,
            manifest,
            out,
            seed,
            epochs,
            values,
        })
        .map(|_| ()),
        Command::Predict { checkpoint, emg, out } => cmd_predict(&PredictArgs { checkpoint, emg, out }).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
