//! `oomsvd`: matrix generation, decomposition runs and benchmark sweeps.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use oomsvd_core::Error;

/// Exit-code contract: 0 success, 2 configuration error, 3 capacity or
/// OOM-degree-2 error, 4 numeric error, 1 anything else.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Parse(_) => 2,
        Error::Capacity(_) | Error::Degree2(_) => 3,
        Error::Numeric(_) | Error::DegenerateInput(_) => 4,
        _ => 1,
    }
}

fn category_for(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Parse(_) => "config",
        Error::Capacity(_) | Error::Degree2(_) => "capacity",
        Error::Numeric(_) | Error::DegenerateInput(_) => "numeric",
        Error::Collective(_) | Error::Timeout(_) => "collective",
        Error::Store(_) => "store",
        Error::Io(_) => "io",
    }
}

#[derive(Parser)]
#[command(name = "oomsvd", version, about = "Distributed out-of-memory truncated SVD")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dense (.bin) or sparse (Matrix Market) input file.
    Gen(GenArgs),
    /// Decompose one input and write U.bin, sigma.txt, V.bin and metrics.
    Decompose(DecomposeArgs),
    /// Sweep batch counts and queue sizes, one metrics row per run.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    DenseGram,
    ResidualFree,
    Auto,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrientationArg {
    Collinear,
    Orthogonal,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricsFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct GenArgs {
    /// Kind of matrix to generate.
    #[arg(long = "gen", value_enum)]
    kind: GenKind,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Nonzero density in (0, 1]; sparse only.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
}

/// Input selection shared by decompose and bench: a file, or inline
/// generation.
#[derive(Args)]
struct InputArgs {
    /// Input matrix file (dense binary or Matrix Market coordinate).
    #[arg(long, conflicts_with = "gen")]
    input: Option<PathBuf>,
    /// Generate the input in memory instead of reading a file.
    #[arg(long = "gen", value_enum)]
    gen: Option<GenKind>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Nonzero density for inline sparse generation.
    #[arg(long)]
    density: Option<f64>,
}

/// Decomposition parameters shared by decompose and bench.
#[derive(Args)]
struct SolveArgs {
    /// Target rank; -1 means min(m, n).
    #[arg(short = 'k', long = "rank", default_value_t = -1, allow_hyphen_values = true)]
    rank: i64,
    #[arg(long, default_value_t = 1e-10)]
    eps: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Pin every power iteration to this count (convergence check off).
    #[arg(long)]
    fixed_iters: Option<usize>,
    /// Seed for generation and for the iteration start vectors.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PathArg::Auto)]
    path: PathArg,
    /// Number of rank workers spawned inside this process.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Per-worker device-tier budget in bytes (default: effectively
    /// unlimited).
    #[arg(long)]
    device_budget_bytes: Option<u64>,
    #[arg(long, value_enum, default_value_t = OrientationArg::Orthogonal)]
    orientation: OrientationArg,
    /// Synthetic wall-time charge per transferred byte.
    #[arg(long, default_value_t = 0)]
    transfer_cost_ns_per_byte: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Metrics format (decompose defaults to json, bench to csv).
    #[arg(long, value_enum)]
    metrics: Option<MetricsFormat>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Number of batches over the Gram axis.
    #[arg(long, default_value_t = 1)]
    batches: usize,
    /// Task-queue size (concurrent tile tasks / in-flight transfers).
    #[arg(long, default_value_t = 1)]
    queue_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Batch counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    batches: Vec<usize>,
    /// Queue sizes to sweep; rows are emitted only for q_s ≤ n_b.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    queue_size: Vec<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("OOMSVD_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => commands::gen(args),
        Cmd::Decompose(args) => commands::decompose(args),
        Cmd::Bench(args) => commands::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!(
                "{}",
                serde_json::json!({
                    "category": category_for(&e),
                    "exit_code": code,
                    "message": e.to_string(),
                })
            );
            ExitCode::from(code)
        }
    }
}
