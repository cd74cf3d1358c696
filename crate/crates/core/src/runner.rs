//! One-process run orchestration: plans the partition, spawns one worker
//! thread per rank, joins them and aggregates counters.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::comm::{CommGroup, CommStats};
use crate::error::{Error, Result};
use crate::linalg::{MatRef, SvdFactors};
use crate::partition::{
    choose_partition, classify_oom, plan_batches, BatchOrientation, MatrixKind, OomAssessment,
    ProblemShape,
};
use crate::store::{StoreStats, TieredStore};
use crate::svd::{
    svd_truncated_dense, svd_truncated_sparse, IterationReport, SvdConfig, SvdPath, WorkerContext,
};

/// Knobs of one decomposition run that are not part of [`SvdConfig`].
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub workers: usize,
    pub n_b: usize,
    pub q_s: usize,
    pub orientation: BatchOrientation,
    /// Per-worker device budget in bytes.
    pub device_budget: u64,
    pub transfer_cost_ns_per_byte: u64,
    /// Back each rank's host tier with files under this directory.
    pub host_dir: Option<PathBuf>,
    pub comm_timeout: Option<Duration>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            workers: 1,
            n_b: 1,
            q_s: 1,
            orientation: BatchOrientation::Orthogonal,
            device_budget: u64::MAX / 2,
            transfer_cost_ns_per_byte: 0,
            host_dir: None,
            comm_timeout: None,
        }
    }
}

/// Joined results of one run.
#[derive(Debug)]
pub struct RunOutcome {
    /// Factors gathered on rank 0.
    pub factors: Option<SvdFactors>,
    /// Per-rank iteration reports (identical content by construction).
    pub reports: Vec<IterationReport>,
    pub store_stats: Vec<StoreStats>,
    pub comm_stats: CommStats,
    pub assessment: OomAssessment,
    pub effective_path: SvdPath,
    pub wall_time_s: f64,
}

/// Plans, spawns `workers` rank threads, runs the decomposition on each
/// and joins. The input is shared read-only across ranks; every rank
/// gets its own tiered store with the given per-worker budget.
pub fn run_decomposition(
    input: MatRef<'_>,
    cfg: &SvdConfig,
    settings: &RunSettings,
) -> Result<RunOutcome> {
    let (m, n) = (input.rows(), input.cols());
    let k = cfg.resolve_k(m, n)?;
    let kind = match input {
        MatRef::Dense(_) => MatrixKind::Dense,
        MatRef::Csr(c) => MatrixKind::Sparse {
            density: c.nnz() as f64 / (m as f64 * n as f64),
        },
    };
    let effective_path = match (cfg.path, &kind) {
        (SvdPath::Auto, MatrixKind::Dense) => SvdPath::DenseGram,
        (SvdPath::Auto, MatrixKind::Sparse { .. }) => SvdPath::ResidualFree,
        (p, _) => p,
    };

    let plan = choose_partition(m, n, settings.workers)?;
    let batches = plan_batches(&plan, settings.orientation, settings.n_b, settings.q_s)?;
    let shape = ProblemShape { m, n, k, kind };
    let assessment = classify_oom(&shape, &plan, settings.device_budget)?;

    let comms = match settings.comm_timeout {
        Some(t) => CommGroup::with_timeout(settings.workers, t)?,
        None => CommGroup::new(settings.workers)?,
    };

    type WorkerOk = (Option<SvdFactors>, IterationReport, StoreStats, CommStats);
    let started = Instant::now();
    let worker_results: Vec<Result<WorkerOk>> = std::thread::scope(|scope| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|comm| {
                let plan = plan.clone();
                let batches = batches.clone();
                let assessment = assessment.clone();
                let cfg = cfg.clone();
                let settings = settings.clone();
                scope.spawn(move || -> Result<WorkerOk> {
                    let rank = comm.rank();
                    let store = match &settings.host_dir {
                        Some(dir) => TieredStore::with_file_backed_host(
                            settings.device_budget,
                            settings.transfer_cost_ns_per_byte,
                            dir.join(format!("rank{rank}")),
                        )?,
                        None => TieredStore::with_transfer_cost(
                            settings.device_budget,
                            settings.transfer_cost_ns_per_byte,
                        ),
                    };
                    let ctx = WorkerContext {
                        comm,
                        store: store.clone(),
                        plan,
                        batches,
                        assessment,
                    };
                    let out = match effective_path {
                        SvdPath::DenseGram => svd_truncated_dense(input, &cfg, &ctx)?,
                        SvdPath::ResidualFree => svd_truncated_sparse(input, &cfg, &ctx)?,
                        SvdPath::Auto => unreachable!("path resolved above"),
                    };
                    Ok((out.factors, out.report, store.stats(), ctx.comm.stats()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let wall_time_s = started.elapsed().as_secs_f64();

    let mut factors = None;
    let mut reports = Vec::with_capacity(settings.workers);
    let mut store_stats = Vec::with_capacity(settings.workers);
    let mut comm_stats = CommStats::default();
    // Prefer the most specific error: when one rank fails for a real
    // reason, communicator poisoning makes the others fail with less
    // informative collective/timeout errors.
    let mut first_error: Option<Error> = None;
    for (rank, result) in worker_results.into_iter().enumerate() {
        match result {
            Ok((f, report, stats, comm)) => {
                if rank == 0 {
                    factors = f;
                    comm_stats = comm;
                }
                reports.push(report);
                store_stats.push(stats);
            }
            Err(e) => {
                let current_is_generic = matches!(
                    first_error,
                    None | Some(Error::Collective(_)) | Some(Error::Timeout(_))
                );
                let new_is_specific = !matches!(e, Error::Collective(_) | Error::Timeout(_));
                if first_error.is_none() || (current_is_generic && new_is_specific) {
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    Ok(RunOutcome {
        factors,
        reports,
        store_stats,
        comm_stats,
        assessment,
        effective_path,
        wall_time_s,
    })
}
