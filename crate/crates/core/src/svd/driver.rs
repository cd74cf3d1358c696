//! Truncated-SVD drivers: the deflation loop shared by the dense-Gram
//! path and the residual-free sparse path.
//!
//! Each rank runs the driver once; collectives keep the iterate and the
//! singular values identical across ranks. Wide problems (`n > m`) are
//! decomposed through their transpose, which turns the column partition
//! into a row partition and swaps the factor roles on output.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::gram::{dist_gram, BatchSource, GramOptions};
use crate::linalg::{empty_factors, CsrMatrix, DenseMatrix, DenseVector, MatRef, SvdFactors};
use crate::partition::{OomDegree, PartitionAxis, Tier};
use crate::store::TieredStore;
use crate::svd::power::{svd_1d, IterControl};
use crate::svd::residual::{dist_compute_v, v_batch_block, VBatches};
use crate::svd::{ComponentReport, IterationReport, SvdConfig, WorkerContext};

/// Per-rank result of a truncated decomposition: gathered factors on
/// rank 0 (`None` elsewhere) plus the iteration report on every rank.
#[derive(Debug)]
pub struct SvdOutput {
    pub factors: Option<SvdFactors>,
    pub report: IterationReport,
}

enum DrivePath {
    DenseGram,
    ResidualFree,
}

/// This rank's row slab of the tall orientation of the input: wide
/// problems are transposed first, so the partitioned axis always maps to
/// slab rows.
enum TallSlab {
    Dense(DenseMatrix),
    Csr(CsrMatrix),
}

impl TallSlab {
    fn cut(a: MatRef<'_>, ctx: &WorkerContext) -> Result<TallSlab> {
        let wide = ctx.plan.axis == PartitionAxis::Column;
        let slab = ctx.plan.slab(ctx.comm.rank());
        Ok(match a {
            MatRef::Dense(d) => {
                let tall = if wide { d.transposed() } else { d.clone() };
                TallSlab::Dense(tall.row_slab(slab.start, slab.end)?)
            }
            MatRef::Csr(c) => {
                let tall = if wide { c.transposed() } else { c.clone() };
                TallSlab::Csr(tall.row_slab(slab.start, slab.end)?)
            }
        })
    }

    fn as_ref(&self) -> MatRef<'_> {
        match self {
            TallSlab::Dense(d) => MatRef::Dense(d),
            TallSlab::Csr(c) => MatRef::Csr(c),
        }
    }
}

/// Truncated SVD via explicit blockwise residuals and the distributed
/// Gram engine (the dense-input route; CSR operands are accepted and
/// read directly when this path is forced on them).
pub fn svd_truncated_dense(
    a: MatRef<'_>,
    cfg: &SvdConfig,
    ctx: &WorkerContext,
) -> Result<SvdOutput> {
    let k = cfg.resolve_k(a.rows(), a.cols())?;
    let slab = TallSlab::cut(a, ctx)?;
    drive(slab.as_ref(), DrivePath::DenseGram, k, cfg, ctx)
}

/// Truncated SVD via the residual-free path: the input is never
/// densified and no `m×n` or `n×n` dense intermediate is allocated.
pub fn svd_truncated_sparse(
    a: MatRef<'_>,
    cfg: &SvdConfig,
    ctx: &WorkerContext,
) -> Result<SvdOutput> {
    let k = cfg.resolve_k(a.rows(), a.cols())?;
    let slab = TallSlab::cut(a, ctx)?;
    drive(slab.as_ref(), DrivePath::ResidualFree, k, cfg, ctx)
}

/// Column batches of the deflated residual `A − UΣVᵀ`, materialized
/// block by block for the Gram engine. The original input is read
/// directly; only one `local_rows × batch` block exists at a time.
struct ResidualSource<'a> {
    a_slab: MatRef<'a>,
    u_cols: &'a [Vec<f64>],
    sigma: &'a [f64],
    v_cols: &'a [Vec<f64>],
}

impl BatchSource for ResidualSource<'_> {
    fn g_dim(&self) -> usize {
        self.a_slab.cols()
    }

    fn local_rows(&self) -> usize {
        self.a_slab.rows()
    }

    fn materialize(&self, c0: usize, c1: usize) -> Vec<f64> {
        let rows = self.local_rows();
        let width = c1 - c0;
        let mut out = vec![0.0f64; rows * width];
        match self.a_slab {
            MatRef::Dense(d) => {
                for r in 0..rows {
                    out[r * width..(r + 1) * width].copy_from_slice(&d.row(r)[c0..c1]);
                }
            }
            MatRef::Csr(s) => {
                for r in 0..rows {
                    for (c, v) in s.row_entries(r) {
                        if c >= c0 && c < c1 {
                            out[r * width + (c - c0)] = v;
                        }
                    }
                }
            }
        }
        for (t, &s) in self.sigma.iter().enumerate() {
            let u = &self.u_cols[t];
            let v = &self.v_cols[t];
            for r in 0..rows {
                let w = u[r] * s;
                if w == 0.0 {
                    continue;
                }
                let orow = &mut out[r * width..(r + 1) * width];
                for (o, vc) in orow.iter_mut().zip(&v[c0..c1]) {
                    *o -= w * vc;
                }
            }
        }
        out
    }
}

fn drive(
    a_slab: MatRef<'_>,
    path: DrivePath,
    k: usize,
    cfg: &SvdConfig,
    ctx: &WorkerContext,
) -> Result<SvdOutput> {
    let comm = &ctx.comm;
    let store = &ctx.store;
    let g = ctx.plan.cross_len();
    if a_slab.cols() != g {
        return Err(Error::Shape(format!(
            "slab has {} columns but the plan's cross axis is {g}",
            a_slab.cols()
        )));
    }
    let m_loc = a_slab.rows();
    let placement = &ctx.assessment.placement;
    // The batched heavy cofactor of the (possibly transposed) run.
    let staged_v = match ctx.plan.axis {
        PartitionAxis::Row => placement.v == Tier::Host,
        PartitionAxis::Column => placement.u == Tier::Host,
    };

    // Pin the permanently device-resident arrays for the whole run.
    let mut reservations = Vec::new();
    if placement.a == Tier::Device {
        let bytes = match a_slab {
            MatRef::Dense(d) => (d.rows() * d.cols() * 8) as u64,
            MatRef::Csr(c) => c.storage_bytes(),
        };
        reservations.push(store.reserve("input slab", bytes)?);
    }
    reservations.push(store.reserve("narrow cofactor slab", (m_loc * k * 8) as u64)?);
    if !staged_v {
        reservations.push(store.reserve("replicated cofactor", (g * k * 8) as u64)?);
    }
    reservations.push(store.reserve(
        "singular values and iteration vectors",
        ((k + 4 * g + m_loc) * 8) as u64,
    )?);

    let control = IterControl {
        eps: cfg.eps,
        max_iter: cfg.max_iter,
        fixed_iters: cfg.fixed_iters,
    };
    let started = Instant::now();

    let mut u_cols: Vec<Vec<f64>> = Vec::new();
    let mut v_cols: Vec<Vec<f64>> = Vec::new();
    let mut sigma: Vec<f64> = Vec::new();
    let mut components: Vec<ComponentReport> = Vec::new();
    let mut truncated_at = None;

    for l in 0..k {
        let seed_l = cfg.seed.wrapping_add(l as u64 + 1);
        let power = match path {
            DrivePath::DenseGram => {
                let source = ResidualSource {
                    a_slab,
                    u_cols: &u_cols,
                    sigma: &sigma,
                    v_cols: &v_cols,
                };
                let options = GramOptions {
                    layout: ctx.assessment.gram_layout,
                    evict_operands_after_task: ctx.assessment.degree == OomDegree::Degree1,
                };
                // One Gram per component, reused across all iterations.
                let gram = dist_gram(&source, &ctx.batches, comm, store, &options)?;
                let out = svd_1d(|v| gram.matvec(v, comm), g, &control, seed_l);
                gram.release();
                out
            }
            DrivePath::ResidualFree => {
                let v_batches = if staged_v {
                    VBatches::Staged { l: sigma.len() }
                } else {
                    VBatches::Memory(&v_cols)
                };
                svd_1d(
                    |v| {
                        dist_compute_v(
                            a_slab,
                            &u_cols,
                            &sigma,
                            &v_batches,
                            v,
                            &ctx.batches,
                            comm,
                            store,
                        )
                    },
                    g,
                    &control,
                    seed_l,
                )
            }
        };
        let outcome = match power {
            Ok(o) => o,
            Err(Error::DegenerateInput(_)) => {
                truncated_at = Some(l);
                break;
            }
            Err(e) => return Err(e),
        };

        // Rank exhaustion: the iterate lives on the deflated residual,
        // whose Gram norm estimates the next singular value squared. A
        // vanished residual means the remaining "component" is noise even
        // though ‖A v‖ below would not be small.
        let scale = sigma.first().copied().unwrap_or(1.0).max(1.0);
        if outcome.operator_norm.sqrt() <= 1e-12 * scale {
            truncated_at = Some(l);
            break;
        }

        // Pair extraction multiplies the ORIGINAL input, not the residual.
        let v_l = outcome.vector;
        let u_raw = a_slab.matvec(&v_l)?;
        let mut sq = DenseVector::new(vec![u_raw.as_slice().iter().map(|x| x * x).sum()]);
        comm.all_reduce_sum_vec(&mut sq)?;
        let sigma_l = sq.as_slice()[0].sqrt();
        if !sigma_l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite singular value at component {l}"
            )));
        }
        if sigma_l <= 1e-12 {
            truncated_at = Some(l);
            break;
        }
        let u_col: Vec<f64> = u_raw.as_slice().iter().map(|x| x / sigma_l).collect();

        components.push(ComponentReport {
            iterations: outcome.iterations,
            converged: outcome.converged,
            final_alignment: outcome.final_alignment,
            sigma: sigma_l,
        });
        u_cols.push(u_col);
        v_cols.push(v_l.into_vec());
        sigma.push(sigma_l);

        if staged_v {
            stage_v_batches(store, ctx, &v_cols)?;
        }
    }

    // Phase separation before counters are aggregated by the caller.
    comm.barrier()?;
    if staged_v {
        for j in 0..ctx.batches.n_b {
            store.host_remove(v_batch_block(j));
        }
    }
    drop(reservations);

    let report = IterationReport {
        components,
        truncated_at,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    // Fixed-iteration (benchmark) runs may stop far from convergence, so
    // their singular values are estimates and need not come out ordered.
    let validate_order = cfg.fixed_iters.is_none();
    let factors = gather_factors(ctx, u_cols, sigma, v_cols, validate_order)?;
    Ok(SvdOutput { factors, report })
}

/// Writes the current V columns into the host tier as row-major batches.
fn stage_v_batches(store: &TieredStore, ctx: &WorkerContext, v_cols: &[Vec<f64>]) -> Result<()> {
    let l = v_cols.len();
    for (j, range) in ctx
        .batches
        .ranges_for_rank(ctx.comm.rank())
        .iter()
        .enumerate()
    {
        let rows = range.len();
        let mut block = vec![0.0f64; rows * l];
        for (t, col) in v_cols.iter().enumerate() {
            for (r, row) in range.clone().enumerate() {
                block[r * l + t] = col[row];
            }
        }
        store.host_put(v_batch_block(j), &block)?;
    }
    Ok(())
}

/// Gathers the distributed narrow cofactor to rank 0, swaps factor roles
/// for transposed (wide) runs, and applies the sign convention: the
/// largest-magnitude entry of each right singular vector is positive.
fn gather_factors(
    ctx: &WorkerContext,
    u_cols: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    v_cols: Vec<Vec<f64>>,
    validate_order: bool,
) -> Result<Option<SvdFactors>> {
    let comm = &ctx.comm;
    let wide = ctx.plan.axis == PartitionAxis::Column;
    let k_done = sigma.len();
    if k_done == 0 {
        return Ok(if comm.rank() == 0 {
            Some(empty_factors(ctx.plan.m, ctx.plan.n))
        } else {
            None
        });
    }

    let part_len = ctx.plan.partitioned_len();
    let g = ctx.plan.cross_len();
    let slab = ctx.plan.slab(comm.rank());
    let mut narrow = DenseMatrix::zeros(part_len, k_done);
    for (t, col) in u_cols.iter().enumerate() {
        for (r, row) in slab.clone().enumerate() {
            narrow.set(row, t, col[r]);
        }
    }
    comm.reduce_sum_mat(&mut narrow, 0)?;
    if comm.rank() != 0 {
        return Ok(None);
    }

    let mut wide_factor = DenseMatrix::zeros(g, k_done);
    for (t, col) in v_cols.iter().enumerate() {
        wide_factor.set_column(t, col);
    }

    let (mut u, mut v) = if wide {
        (wide_factor, narrow)
    } else {
        (narrow, wide_factor)
    };
    for t in 0..k_done {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for r in 0..v.rows() {
            let a = v.at(r, t).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if v.at(best, t) < 0.0 {
            for r in 0..v.rows() {
                v.set(r, t, -v.at(r, t));
            }
            for r in 0..u.rows() {
                u.set(r, t, -u.at(r, t));
            }
        }
    }
    let k = sigma.len();
    Ok(Some(if validate_order {
        SvdFactors::new(u, DenseVector::new(sigma), v)?
    } else {
        SvdFactors {
            u,
            sigma: DenseVector::new(sigma),
            v,
            k,
        }
    }))
}
