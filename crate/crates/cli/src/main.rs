//! `lipforge`: compute scalings, verify manifests, train and certify models.
//!
//! Results are printed to stdout as JSON lines; diagnostics go to stderr.
//! Exit codes: 0 success, 2 malformed input, 3 infeasible scaling or missing
//! certificate, 4 iteration limit reached, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lipforge_core::LipError;

#[derive(Parser)]
#[command(name = "lipforge", version, about = "1-Lipschitz layers from diagonal scalings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Sn,
    Aol,
    Sll,
    Gamma,
    Opt,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a diagonal scaling T for a weight matrix.
    Scale {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        weights: PathBuf,
        /// Positive weights for `sll` (defaults to all ones).
        #[arg(long)]
        q: Option<PathBuf>,
        /// Coordinate-descent sweeps for `opt`.
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every layer of a model manifest and estimate its Lipschitz constant.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a residual SLL classifier on a synthetic dataset.
    Train {
        /// JSON training configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "two-moons")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Certified accuracy of a model on a dataset directory.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// Directory with `inputs.mtx.txt` (features x samples) and `labels.txt`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = lipforge_core::verify::DEFAULT_RADII)]
        radii: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also attack every sample with PGD and count certificate violations.
        #[arg(long)]
        attack: bool,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long, default_value_t = 2.5)]
        step_factor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the SN, AOL and SLL diagonals on random matrices.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<LipError>()) {
        Some(LipError::Parse { .. }) => 2,
        Some(LipError::Feasibility { .. } | LipError::LmiInfeasible { .. } | LipError::Certificate { .. }) => 3,
        Some(LipError::Convergence { .. }) => 4,
        _ => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("LIPFORGE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| anyhow::anyhow!("LIPFORGE_THREADS must be a number, got {v:?}"))?,
        Err(_) => 0,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Scale { method, weights, q, iters, seed } => commands::scale(method, &weights, q.as_deref(), iters, seed),
        Command::Verify { model, pairs, seed } => commands::verify(&model, pairs, seed),
        Command::Train { config, data, out, samples, noise } => {
            commands::train(config.as_deref(), &data, &out, samples, noise)
        }
        Command::Certify { model, data, radii, out, attack, steps, restarts, step_factor, seed } => {
            let pgd = attack.then_some(lipforge_core::verify::PgdConfig { steps, restarts, step_factor });
            commands::certify(&model, &data, &radii, out.as_deref(), pgd, seed)
        }
        Command::Bench { sizes, reps, seed } => commands::bench(&sizes, reps, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
