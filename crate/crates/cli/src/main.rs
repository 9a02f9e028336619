#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmrg_core::dmrg::Backend;

/// Batch runner for two-site DMRG on symmetric block-sparse tensors.
#[derive(Parser, Debug)]
#[command(name = "dmrg", version)]
struct Cli {
    /// Worker threads for the tensor kernels.
    #[arg(long, global = true, env = "DMRG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the sweep schedule and stream JSON-lines reports.
    Run(RunArgs),
    /// Time single updates over a restricted bond range and write CSV.
    Bench(BenchArgs),
    /// Compute the exact ground energy of the model and record it.
    VerifyOracle(OracleArgs),
    /// Dump the analytic cost model as CSV.
    CostModel(CostArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Storage backend; repeat to run several.
    #[arg(long = "backend", value_parser = parse_backend)]
    pub backends: Vec<Backend>,
    /// Cross-check energies of all selected backends (all three if fewer
    /// than two are given).
    #[arg(long)]
    pub compare: bool,
    /// Compare the final energy with the exact-diagonalization reference.
    #[arg(long)]
    pub verify: bool,
    /// Golden store consulted by --verify before falling back to ED.
    #[arg(long)]
    pub golden: Option<PathBuf>,
    /// JSON-lines destination (default stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// MPS snapshot rewritten after every half-sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from a saved MPS instead of a random state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    pub config: PathBuf,
    /// Backends to time (default all three).
    #[arg(long = "backend", value_parser = parse_backend)]
    pub backends: Vec<Backend>,
    /// CSV destination (default stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    pub config: PathBuf,
    /// Golden store (TOML) to create or check.
    #[arg(long)]
    pub golden: PathBuf,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// MPO bond dimension.
    #[arg(long, default_value_t = 26)]
    pub k: u64,
    /// Number of sites.
    #[arg(long, default_value_t = 36)]
    pub sites: u64,
    /// Processor counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 4, 16, 64, 256])]
    pub procs: Vec<u64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: threads: must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let out = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::VerifyOracle(a) => commands::verify_oracle(&a),
        Command::CostModel(a) => commands::cost_model(&a),
    };
    match out {
        Ok(()) | Err(commands::Failure::Closed) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
