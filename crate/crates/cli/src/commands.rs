//! Subcommand implementations.

use std::fs;


use log::info;

use oomsvd_core::error::{Error, Result};
use oomsvd_core::io::{self, MatrixData};
use oomsvd_core::linalg::MatRef;
use oomsvd_core::metrics::{CsvRow, RunConfig, RunMetrics};
use oomsvd_core::partition::BatchOrientation;
use oomsvd_core::runner::{run_decomposition, RunOutcome, RunSettings};
use oomsvd_core::svd::{SvdConfig, SvdPath};
use oomsvd_core::generate;

use crate::{
    BenchArgs, DecomposeArgs, GenArgs, GenKind, InputArgs, MetricsFormat, OrientationArg,
    PathArg, SolveArgs,
};

pub fn gen(args: GenArgs) -> Result<()> {
    match args.kind {
        GenKind::Dense => {
            let m = generate::gen_dense(args.rows, args.cols, args.seed);
            io::write_dense_matrix(&args.out, &m)?;
            info!(
                "wrote dense {}x{} matrix to {}",
                args.rows,
                args.cols,
                args.out.display()
            );
        }
        GenKind::Sparse => {
            let density = args.density.ok_or_else(|| {
                Error::Config("sparse generation requires --density".into())
            })?;
            let m = generate::gen_sparse(args.rows, args.cols, density, args.seed)?;
            io::write_matrix_market(&args.out, &m)?;
            info!(
                "wrote sparse {}x{} matrix ({} nonzeros) to {}",
                args.rows,
                args.cols,
                m.nnz(),
                args.out.display()
            );
        }
    }
    Ok(())
}

fn load_input(input: &InputArgs, seed: u64) -> Result<MatrixData> {
    if let Some(path) = &input.input {
        return io::read_matrix(path);
    }
    let kind = input.gen.ok_or_else(|| {
        Error::Config("no input: pass --input FILE or --gen {dense|sparse} with --rows/--cols".into())
    })?;
    let (rows, cols) = match (input.rows, input.cols) {
        (Some(r), Some(c)) => (r, c),
        _ => {
            return Err(Error::Config(
                "inline generation requires both --rows and --cols".into(),
            ))
        }
    };
    Ok(match kind {
        GenKind::Dense => MatrixData::Dense(generate::gen_dense(rows, cols, seed)),
        GenKind::Sparse => {
            let density = input
                .density
                .ok_or_else(|| Error::Config("sparse generation requires --density".into()))?;
            MatrixData::Sparse(generate::gen_sparse(rows, cols, density, seed)?)
        }
    })
}

fn svd_config(solve: &SolveArgs) -> SvdConfig {
    SvdConfig {
        k: solve.rank,
        eps: solve.eps,
        max_iter: solve.max_iter,
        fixed_iters: solve.fixed_iters,
        seed: solve.seed,
        path: match solve.path {
            PathArg::DenseGram => SvdPath::DenseGram,
            PathArg::ResidualFree => SvdPath::ResidualFree,
            PathArg::Auto => SvdPath::Auto,
        },
    }
}

fn run_settings(solve: &SolveArgs, n_b: usize, q_s: usize) -> Result<RunSettings> {
    let orientation = match solve.orientation {
        OrientationArg::Orthogonal => BatchOrientation::Orthogonal,
        OrientationArg::Collinear => {
            return Err(Error::Config(
                "collinear batching is plannable but the decomposition engines batch \
                 across the Gram axis; use --orientation orthogonal"
                    .into(),
            ))
        }
    };
    Ok(RunSettings {
        workers: solve.workers,
        n_b,
        q_s,
        orientation,
        device_budget: solve.device_budget_bytes.unwrap_or(u64::MAX / 2),
        transfer_cost_ns_per_byte: solve.transfer_cost_ns_per_byte,
        host_dir: None,
        comm_timeout: None,
    })
}

fn collect_metrics(
    outcome: &RunOutcome,
    solve: &SolveArgs,
    n_b: usize,
    q_s: usize,
) -> RunMetrics {
    let mut h2d_bytes = 0;
    let mut d2h_bytes = 0;
    let mut h2d_count = 0;
    let mut d2h_count = 0;
    let mut peaks = Vec::with_capacity(outcome.store_stats.len());
    for st in &outcome.store_stats {
        peaks.push(st.peak_device_used);
        h2d_bytes += st.h2d_bytes;
        d2h_bytes += st.d2h_bytes;
        h2d_count += st.h2d_count;
        d2h_count += st.d2h_count;
    }
    RunMetrics {
        config: RunConfig {
            workers: solve.workers,
            n_b,
            q_s,
            k: solve.rank,
            eps: solve.eps,
            max_iter: solve.max_iter,
            fixed_iters: solve.fixed_iters,
            seed: solve.seed,
            path: outcome.effective_path.to_string(),
            orientation: "orthogonal".into(),
            device_budget_bytes: solve.device_budget_bytes.unwrap_or(u64::MAX / 2),
            transfer_cost_ns_per_byte: solve.transfer_cost_ns_per_byte,
        },
        wall_time_s: outcome.wall_time_s,
        peak_device_bytes: peaks,
        h2d_bytes,
        d2h_bytes,
        h2d_count,
        d2h_count,
        all_reduce_calls: outcome.comm_stats.all_reduce_calls,
        reduce_calls: outcome.comm_stats.reduce_calls,
        comm_bytes: outcome.comm_stats.bytes_moved,
        report: outcome.reports[0].clone(),
    }
}

fn as_ref(data: &MatrixData) -> MatRef<'_> {
    match data {
        MatrixData::Dense(m) => MatRef::Dense(m),
        MatrixData::Sparse(m) => MatRef::Csr(m),
    }
}

pub fn decompose(args: DecomposeArgs) -> Result<()> {
    let data = load_input(&args.input, args.solve.seed)?;
    let cfg = svd_config(&args.solve);
    let settings = run_settings(&args.solve, args.batches, args.queue_size)?;
    info!(
        "decomposing {}x{} input with {} worker(s), n_b={}, q_s={}",
        data.rows(),
        data.cols(),
        settings.workers,
        settings.n_b,
        settings.q_s
    );
    let outcome = run_decomposition(as_ref(&data), &cfg, &settings)?;
    info!(
        "degree {:?}, path {}, wall {:.3}s",
        outcome.assessment.degree, outcome.effective_path, outcome.wall_time_s
    );

    fs::create_dir_all(&args.solve.out_dir)?;
    let factors = outcome
        .factors
        .as_ref()
        .expect("rank 0 gathers the factors");
    io::write_factors(&args.solve.out_dir, factors)?;
    if let Some(t) = outcome.reports[0].truncated_at {
        info!("rank exhausted: returned {t} component(s)");
    }

    let metrics = collect_metrics(&outcome, &args.solve, args.batches, args.queue_size);
    match args.solve.metrics.unwrap_or(MetricsFormat::Json) {
        MetricsFormat::Json => {
            fs::write(args.solve.out_dir.join("metrics.json"), metrics.to_json())?
        }
        MetricsFormat::Csv => fs::write(
            args.solve.out_dir.join("metrics.csv"),
            format!("{}\n{}\n", CsvRow::HEADER, metrics.csv_row().to_line()),
        )?,
    }
    println!(
        "decomposed: k={} components, sigma_1={}",
        factors.k,
        factors.sigma.as_slice().first().copied().unwrap_or(0.0)
    );
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    if args.batches.is_empty() || args.queue_size.is_empty() {
        return Err(Error::Config("bench sweep lists must be nonempty".into()));
    }
    let data = load_input(&args.input, args.solve.seed)?;
    let cfg = svd_config(&args.solve);
    fs::create_dir_all(&args.solve.out_dir)?;

    let mut rows: Vec<RunMetrics> = Vec::new();
    for &n_b in &args.batches {
        for &q_s in &args.queue_size {
            // Larger queues than batches would only reserve dead buffers.
            if q_s > n_b {
                continue;
            }
            let settings = run_settings(&args.solve, n_b, q_s)?;
            let outcome = run_decomposition(as_ref(&data), &cfg, &settings)?;
            info!(
                "n_b={n_b} q_s={q_s}: wall {:.3}s peak {} B",
                outcome.wall_time_s,
                outcome
                    .store_stats
                    .iter()
                    .map(|s| s.peak_device_used)
                    .max()
                    .unwrap_or(0)
            );
            rows.push(collect_metrics(&outcome, &args.solve, n_b, q_s));
        }
    }

    match args.solve.metrics.unwrap_or(MetricsFormat::Csv) {
        MetricsFormat::Csv => {
            let mut out = String::from(CsvRow::HEADER);
            out.push('\n');
            for r in &rows {
                out.push_str(&r.csv_row().to_line());
                out.push('\n');
            }
            fs::write(args.solve.out_dir.join("bench.csv"), out)?;
        }
        MetricsFormat::Json => {
            let json = serde_json::to_string_pretty(&rows)
                .map_err(|e| Error::Parse(format!("metrics json: {e}")))?;
            fs::write(args.solve.out_dir.join("bench.json"), json)?;
        }
    }
    println!("bench: {} run(s) written to {}", rows.len(), args.solve.out_dir.display());
    Ok(())
}
