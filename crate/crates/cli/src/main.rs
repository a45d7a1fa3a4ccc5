//! `agq`: quantize weight stores, analyze activations, evaluate toy decoder
//! stacks and benchmark the GEMM kernels.
//!
//! Exit codes: 0 success, 1 config error, 2 I/O error, 3 numeric error,
//! 4 threshold failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::bench::{DEFAULT_KERNELS, DEFAULT_REPEATS, DEFAULT_SIZES};
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "agq", version, about = "Activation-guided low-bit quantization toolkit")]
struct Cli {
    /// Worker threads for GEMM row blocks; outputs do not depend on it.
    #[arg(long, global = true, env = "AGQ_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize every f32 tensor of a store to 4-bit codes plus a params sidecar.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Outlier statistics of a hidden-state tensor and attention locality of the stack on it.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        store: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Report path; overrides `outputs.report`, stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare quantized and FP32 stack outputs on seeded inputs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        store: PathBuf,
        /// Input seed; defaults to `seeds.input`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kernel latency as JSON lines.
    Bench {
        #[arg(long, default_value = DEFAULT_SIZES)]
        sizes: String,
        #[arg(long, default_value = DEFAULT_KERNELS)]
        kernels: String,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded block weights for the configured stack.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seeded hidden states `eval` generates, as tensor `x`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the run-config JSON schema.
    Schema,
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Quantize { config, input, out } => {
            RunConfig::load(&config)?;
            commands::quantize::run(&input, &out)
        }
        Command::Analyze {
            config,
            store,
            input,
            out,
        } => commands::analyze::run(&RunConfig::load(&config)?, &store, &input, out.as_deref()),
        Command::Eval {
            config,
            store,
            seed,
            out,
        } => commands::eval::run(&RunConfig::load(&config)?, &store, seed, out.as_deref()),
        Command::Bench {
            sizes,
            kernels,
            repeats,
            out,
        } => commands::bench::run(&sizes, &kernels, repeats, out.as_deref()),
        Command::Init { config, out } => commands::init::init_weights(&RunConfig::load(&config)?, &out),
        Command::Synth { config, seed, out } => commands::init::synth_input(&RunConfig::load(&config)?, seed, &out),
        Command::Schema => {
            print!("{}", config::RUN_CONFIG_SCHEMA);
            Ok(())
        }
    }
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            return Err(CliError::Config(
                msg.trim_start_matches("error: ").trim_end().to_owned(),
            ));
        }
    };
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
