//! `forkseq` command-line driver.
//!
//! Exit codes: 0 success, 1 failure, 2 usage or configuration error,
//! 3 missing artifact.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forkseq::Error;

use crate::config::{KeyDef, RunConfig};

// glibc's mmap threshold makes large tape buffers fault in fresh pages on
// every call, which distorts benchmark timings.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "forkseq", version, about = "Multi-horizon quantile forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default runs/<timestamp>-<command>-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct DataFlags {
    /// Long CSV (unique_id,ds,y) or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    /// Frequency name (Monthly, Quarterly, ...).
    #[arg(long)]
    frequency: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder-decoder forecaster.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// Training scheme: fs or ws.
        #[arg(long)]
        scheme: Option<String>,
        /// Encoder family: mlp, rnn, lstm, cnn, transformer.
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
        /// sgd or adam.
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Forecast every test FCD from a checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: Option<String>,
        /// fs, ws_full, ws_restricted or ws_restricted:<L>.
        #[arg(long)]
        scheme: Option<String>,
        /// none, moving_average, moving_median or cumulative_average.
        #[arg(long)]
        ensemble: Option<String>,
    },
    /// Test-split metrics of one or more checkpoints (one per seed).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// Comma-separated checkpoint files.
        #[arg(long)]
        checkpoints: Option<String>,
        /// Comma-separated forecast CSVs, instead of checkpoints.
        #[arg(long)]
        forecasts: Option<String>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        ensemble: Option<String>,
        /// Seeds evaluated concurrently.
        #[arg(long)]
        parallel: Option<String>,
    },
    /// Linear AR convergence ablation over window sample sizes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        sample_sizes: Option<String>,
        #[arg(long)]
        learning_rates: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        /// Grid cells trained concurrently.
        #[arg(long)]
        parallel: Option<String>,
    },
    /// Variance-rate simulations for M-dependent processes.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// 1 (mean estimator) or 2 (ensembled forecasts).
        #[arg(long)]
        theorem: Option<String>,
        /// Comma-separated dependence orders.
        #[arg(long = "M")]
        m: Option<String>,
        #[arg(long)]
        reps: Option<String>,
        /// Comma-separated M values run concurrently.
        #[arg(long)]
        parallel: Option<String>,
    },
    /// Inference scaling benchmark (single-threaded).
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated encoder families.
        #[arg(long)]
        family: Option<String>,
        /// Comma-separated schemes: fs, ws_restricted[:L], ws_full.
        #[arg(long)]
        schemes: Option<String>,
        /// Comma-separated series lengths.
        #[arg(long = "T")]
        t: Option<String>,
        #[arg(long)]
        reps: Option<String>,
        #[arg(long)]
        counters_only: bool,
    },
}

type Flags = Vec<(&'static str, Option<String>)>;

fn data_flags(d: DataFlags) -> Flags {
    vec![("data", d.data), ("frequency", d.frequency)]
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    type Run = fn(&mut RunConfig) -> forkseq::Result<()>;
    let (name, common, flags, defs, model_keys, run): (&'static str, Common, Flags, Vec<KeyDef>, bool, Run) =
        match cli.command {
            Command::Train {
                common,
                data,
                scheme,
                encoder,
                steps,
                lr,
                batch_size,
                optimizer,
            } => {
                let mut f = data_flags(data);
                f.extend([
                    ("scheme", scheme),
                    ("encoder", encoder),
                    ("steps", steps),
                    ("lr", lr),
                    ("batch_size", batch_size),
                    ("optimizer", optimizer),
                ]);
                ("train", common, f, commands::train_keys(), true, commands::cmd_train)
            }
            Command::Forecast {
                common,
                data,
                checkpoint,
                scheme,
                ensemble,
            } => {
                let mut f = data_flags(data);
                f.extend([("checkpoint", checkpoint), ("scheme", scheme), ("ensemble", ensemble)]);
                ("forecast", common, f, commands::forecast_keys(), false, commands::cmd_forecast)
            }
            Command::Evaluate {
                common,
                data,
                checkpoints,
                forecasts,
                scheme,
                ensemble,
                parallel,
            } => {
                let mut f = data_flags(data);
                f.extend([
                    ("checkpoints", checkpoints),
                    ("forecasts", forecasts),
                    ("scheme", scheme),
                    ("ensemble", ensemble),
                    ("parallel", parallel),
                ]);
                ("evaluate", common, f, commands::evaluate_keys(), false, commands::cmd_evaluate)
            }
            Command::Ablate {
                common,
                data,
                sample_sizes,
                learning_rates,
                steps,
                parallel,
            } => {
                let mut f = data_flags(data);
                f.extend([
                    ("sample_sizes", sample_sizes),
                    ("learning_rates", learning_rates),
                    ("steps", steps),
                    ("parallel", parallel),
                ]);
                ("ablate", common, f, commands::ablate_keys(), false, commands::cmd_ablate)
            }
            Command::Simulate {
                common,
                theorem,
                m,
                reps,
                parallel,
            } => (
                "simulate",
                common,
                vec![("theorem", theorem), ("M", m), ("reps", reps), ("parallel", parallel)],
                commands::simulate_keys(),
                false,
                commands::cmd_simulate,
            ),
            Command::Bench {
                common,
                family,
                schemes,
                t,
                reps,
                counters_only,
            } => (
                "bench",
                common,
                vec![
                    ("family", family),
                    ("schemes", schemes),
                    ("T", t),
                    ("reps", reps),
                    ("counters_only", counters_only.then(|| "true".to_string())),
                ],
                commands::bench_keys(),
                false,
                commands::cmd_bench,
            ),
        };
    let mut flags = flags;
    flags.push(("seed", common.seed.clone()));
    flags.push(("out", common.out.as_ref().map(|p| p.to_string_lossy().into_owned())));
    let result = RunConfig::resolve(name, &defs, model_keys, common.config.as_deref(), &common.set, &flags)
        .and_then(|mut cfg| run(&mut cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == 2 {
                eprintln!("run `forkseq {name} --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
