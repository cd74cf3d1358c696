//! Distributed, batched Gram product `B = SᵀS` over column batches.
//!
//! Each rank holds a row slab of the operand `S` (`local_rows × g`). The
//! engine splits the `g` columns into `n_b` batches and runs one task per
//! tile `(i, j)` with `i ≤ j`: `n_b(n_b+1)/2` tasks instead of the naive
//! `n_b²`, because the off-diagonal task also produces the transposed
//! tile without fetching its operands a second time. Up to `q_s` tasks
//! run concurrently per rank; collectives are issued in task order via a
//! turnstile so every rank sees the same collective sequence.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::partition::{BatchOrientation, BatchPlan, GramLayout};
use crate::store::{ArrayTag, BlockId, TieredStore};

/// Supplies one rank's local operand slab, one column batch at a time.
pub trait BatchSource: Sync {
    /// Number of columns of `S`; also the dimension of the Gram matrix.
    fn g_dim(&self) -> usize;
    /// Number of rows in this rank's slab.
    fn local_rows(&self) -> usize;
    /// Row-major `local_rows × (c1-c0)` copy of columns `[c0, c1)`.
    fn materialize(&self, c0: usize, c1: usize) -> Vec<f64>;
}

/// Column batches of a dense row slab.
pub struct DenseSlabSource<'a> {
    pub slab: &'a DenseMatrix,
}

impl BatchSource for DenseSlabSource<'_> {
    fn g_dim(&self) -> usize {
        self.slab.cols()
    }

    fn local_rows(&self) -> usize {
        self.slab.rows()
    }

    fn materialize(&self, c0: usize, c1: usize) -> Vec<f64> {
        let width = c1 - c0;
        let mut out = Vec::with_capacity(self.slab.rows() * width);
        for r in 0..self.slab.rows() {
            out.extend_from_slice(&self.slab.row(r)[c0..c1]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GramOptions {
    pub layout: GramLayout,
    /// Release operand blocks as soon as their last pending task is done
    /// (degree-1 behavior); otherwise they stay resident until the end of
    /// the Gram computation.
    pub evict_operands_after_task: bool,
}

impl GramOptions {
    pub fn replicated() -> Self {
        GramOptions {
            layout: GramLayout::ReplicatedDevice,
            evict_operands_after_task: false,
        }
    }
}

/// The assembled Gram operator. In replicated layout every rank holds the
/// full matrix as one device block; in distributed layouts each rank owns
/// the tiles that were reduced to it.
pub struct GramResult {
    dim: usize,
    layout: GramLayout,
    store: TieredStore,
    ranges: Vec<Range<usize>>,
    /// Tiles owned by this rank, keyed by tile coordinates.
    tiles: BTreeMap<(usize, usize), ()>,
    pub tasks_executed: usize,
    pub max_concurrent_tasks: usize,
}

const FULL_B: BlockId = BlockId {
    tag: ArrayTag::B,
    i: usize::MAX,
    j: usize::MAX,
};

fn tile_block(i: usize, j: usize) -> BlockId {
    BlockId::new(ArrayTag::B, i, j)
}

fn operand_block(b: usize) -> BlockId {
    BlockId::new(ArrayTag::A, 0, b)
}

/// `out = aᵀb` for two row-major blocks sharing `rows`.
fn gram_tile(rows: usize, a: &[f64], a_cols: usize, b: &[f64], b_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a_cols * b_cols];
    for r in 0..rows {
        let arow = &a[r * a_cols..(r + 1) * a_cols];
        let brow = &b[r * b_cols..(r + 1) * b_cols];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * b_cols..(i + 1) * b_cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_tile(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Rank owning row `row` of `B` under contiguous ⌈g/N⌉-row slabs.
fn row_owner(row: usize, dim: usize, ranks: usize) -> usize {
    let slab = dim.div_ceil(ranks);
    (row / slab).min(ranks - 1)
}

/// Serializes collective issue order across a rank's concurrent tasks.
struct Turnstile {
    state: Mutex<(usize, Option<Error>)>,
    cv: Condvar,
}

impl Turnstile {
    fn new() -> Self {
        Turnstile {
            state: Mutex::new((0, None)),
            cv: Condvar::new(),
        }
    }

    fn wait_for(&self, turn: usize) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(e) = &st.1 {
                return Err(e.clone());
            }
            if st.0 >= turn {
                return Ok(());
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    fn advance(&self) {
        let mut st = self.state.lock().unwrap();
        st.0 += 1;
        self.cv.notify_all();
    }

    fn poison(&self, e: Error) {
        let mut st = self.state.lock().unwrap();
        if st.1.is_none() {
            st.1 = Some(e);
        }
        self.cv.notify_all();
    }
}

/// Computes the distributed Gram matrix of the operand supplied by
/// `source`, batched per `batches`, with all block traffic routed through
/// `store` and all reductions through `comm`.
pub fn dist_gram(
    source: &dyn BatchSource,
    batches: &BatchPlan,
    comm: &Communicator,
    store: &TieredStore,
    options: &GramOptions,
) -> Result<GramResult> {
    if batches.orientation != BatchOrientation::Orthogonal {
        return Err(Error::Config(
            "the Gram engine requires an orthogonal batch plan; collinear batching \
             does not produce a tile grid"
                .into(),
        ));
    }
    let dim = source.g_dim();
    let ranges: Vec<Range<usize>> = batches.ranges_for_rank(comm.rank()).to_vec();
    let covered: usize = ranges.iter().map(|r| r.len()).sum();
    if covered != dim || ranges.last().map(|r| r.end) != Some(dim) {
        return Err(Error::Shape(format!(
            "batch ranges cover {covered} columns but the operand has {dim}"
        )));
    }

    let n_b = ranges.len();
    let q_s = batches.q_s.max(1);
    // Fig-2c order: column-major over the lower triangle, i.e. (i,j) with
    // i ≤ j enumerated row by row.
    let tasks: Vec<(usize, usize)> = (0..n_b)
        .flat_map(|i| (i..n_b).map(move |j| (i, j)))
        .collect();

    // Pending-task refcount per operand batch, for prompt eviction.
    let mut pending = vec![0usize; n_b];
    for &(i, j) in &tasks {
        pending[i] += 1;
        if j != i {
            pending[j] += 1;
        }
    }
    let pending: Vec<AtomicUsize> = pending.into_iter().map(AtomicUsize::new).collect();

    let replicated = options.layout == GramLayout::ReplicatedDevice;
    let full_lease = if replicated {
        Some(store.alloc(FULL_B, dim * dim)?)
    } else {
        None
    };

    let turnstile = Turnstile::new();
    let owned: Mutex<BTreeMap<(usize, usize), ()>> = Mutex::new(BTreeMap::new());
    let running = AtomicUsize::new(0);
    let peak_running = AtomicUsize::new(0);
    let executed = AtomicUsize::new(0);

    let run_task = |t: usize, i: usize, j: usize| -> Result<()> {
        let in_flight = running.fetch_add(1, Ordering::SeqCst) + 1;
        peak_running.fetch_max(in_flight, Ordering::SeqCst);

        let result = (|| -> Result<()> {
            let ri = ranges[i].clone();
            let rj = ranges[j].clone();
            let rows = source.local_rows();
            let lease_i = store.fetch_with(operand_block(i), || {
                source.materialize(ri.start, ri.end)
            })?;
            let lease_j = if j == i {
                None
            } else {
                Some(store.fetch_with(operand_block(j), || {
                    source.materialize(rj.start, rj.end)
                })?)
            };

            let tile = {
                let a = lease_i.read();
                match &lease_j {
                    None => gram_tile(rows, &a, ri.len(), &a, ri.len()),
                    Some(lj) => {
                        let b = lj.read();
                        gram_tile(rows, &a, ri.len(), &b, rj.len())
                    }
                }
            };

            // Collectives in task order so all ranks pair up correctly.
            turnstile.wait_for(t)?;
            let issue = (|| -> Result<()> {
                let mut local = DenseMatrix::new(ri.len(), rj.len(), tile)?;
                if replicated {
                    comm.all_reduce_sum_mat(&mut local)?;
                    let lease = full_lease.as_ref().expect("replicated layout");
                    let mut full = lease.write();
                    write_tile(&mut full, dim, &local, &ri, &rj);
                    if i != j {
                        let t = local.transposed();
                        write_tile(&mut full, dim, &t, &rj, &ri);
                    }
                } else {
                    let ranks = comm.size();
                    let root = if i == j {
                        j % ranks
                    } else {
                        row_owner(ri.start, dim, ranks)
                    };
                    comm.reduce_sum_mat(&mut local, root)?;
                    if comm.rank() == root {
                        store_tile(store, options, i, j, local.data())?;
                        owned.lock().unwrap().insert((i, j), ());
                    }
                    if i != j {
                        let mirror_root = row_owner(rj.start, dim, ranks);
                        let mut mirror = DenseMatrix::new(
                            rj.len(),
                            ri.len(),
                            transpose_tile(local.data(), ri.len(), rj.len()),
                        )?;
                        // The local tile already holds the global sum on
                        // `root`; everyone else contributes zeros so the
                        // mirror reduction stays a plain fixed-order sum.
                        if comm.rank() != root {
                            mirror = DenseMatrix::zeros(rj.len(), ri.len());
                        }
                        comm.reduce_sum_mat(&mut mirror, mirror_root)?;
                        if comm.rank() == mirror_root {
                            store_tile(store, options, j, i, mirror.data())?;
                            owned.lock().unwrap().insert((j, i), ());
                        }
                    }
                }
                Ok(())
            })();
            turnstile.advance();
            issue?;

            drop(lease_j);
            drop(lease_i);
            if options.evict_operands_after_task {
                if pending[i].fetch_sub(1, Ordering::SeqCst) == 1 {
                    store.evict_if_idle(operand_block(i));
                }
                if j != i && pending[j].fetch_sub(1, Ordering::SeqCst) == 1 {
                    store.evict_if_idle(operand_block(j));
                }
            }
            executed.fetch_add(1, Ordering::SeqCst);
            Ok(())
        })();

        running.fetch_sub(1, Ordering::SeqCst);
        if let Err(e) = &result {
            turnstile.poison(e.clone());
        }
        result
    };

    let slot_errors: Vec<Error> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..q_s)
            .map(|slot| {
                let run_task = &run_task;
                let tasks = &tasks;
                scope.spawn(move || -> Result<()> {
                    let mut t = slot;
                    while t < tasks.len() {
                        let (i, j) = tasks[t];
                        run_task(t, i, j)?;
                        t += q_s;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| h.join().expect("gram slot panicked").err())
            .collect()
    });
    if let Some(e) = slot_errors.into_iter().next() {
        return Err(e);
    }

    // Operand batches are dead once the Gram matrix exists.
    for b in 0..n_b {
        store.evict_if_idle(operand_block(b));
    }
    drop(full_lease);

    Ok(GramResult {
        dim,
        layout: options.layout,
        store: store.clone(),
        ranges,
        tiles: owned.into_inner().unwrap(),
        tasks_executed: executed.load(Ordering::SeqCst),
        max_concurrent_tasks: peak_running.load(Ordering::SeqCst),
    })
}

fn write_tile(full: &mut [f64], dim: usize, tile: &DenseMatrix, ri: &Range<usize>, rj: &Range<usize>) {
    for (r, row) in ri.clone().zip(0..tile.rows()) {
        let src = tile.row(row);
        full[r * dim + rj.start..r * dim + rj.end].copy_from_slice(src);
    }
}

fn store_tile(
    store: &TieredStore,
    options: &GramOptions,
    i: usize,
    j: usize,
    data: &[f64],
) -> Result<()> {
    let id = tile_block(i, j);
    let lease = store.alloc(id, data.len())?;
    lease.write().copy_from_slice(data);
    if options.layout == GramLayout::DistributedHost {
        store.writeback(id)?;
        drop(lease);
        store.evict(id)?;
    }
    Ok(())
}

impl GramResult {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> GramLayout {
        self.layout
    }

    /// `y = B v`. Replicated layout multiplies locally (identical on every
    /// rank); distributed layouts multiply the owned tiles and assemble
    /// the full result with one all-reduce.
    pub fn matvec(&self, v: &DenseVector, comm: &Communicator) -> Result<DenseVector> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "gram matvec of dimension {} with vector of length {}",
                self.dim,
                v.len()
            )));
        }
        match self.layout {
            GramLayout::ReplicatedDevice => {
                let lease = self.store.fetch_pooled(FULL_B)?;
                let b = lease.read();
                let x = v.as_slice();
                let mut y = vec![0.0; self.dim];
                for (r, out) in y.iter_mut().enumerate() {
                    let row = &b[r * self.dim..(r + 1) * self.dim];
                    let mut acc = 0.0;
                    for (a, b) in row.iter().zip(x) {
                        acc += a * b;
                    }
                    *out = acc;
                }
                Ok(DenseVector::new(y))
            }
            GramLayout::DistributedDevice | GramLayout::DistributedHost => {
                let x = v.as_slice();
                let mut y = DenseVector::zeros(self.dim);
                for (&(i, j), ()) in &self.tiles {
                    let ri = self.ranges[i].clone();
                    let rj = self.ranges[j].clone();
                    let lease = self.store.fetch_pooled(tile_block(i, j))?;
                    let t = lease.read();
                    let out = y.as_mut_slice();
                    for (r, row) in ri.clone().zip(0..ri.len()) {
                        let trow = &t[row * rj.len()..(row + 1) * rj.len()];
                        let mut acc = 0.0;
                        for (a, b) in trow.iter().zip(&x[rj.start..rj.end]) {
                            acc += a * b;
                        }
                        out[r] += acc;
                    }
                    drop(t);
                    drop(lease);
                    if self.layout == GramLayout::DistributedHost {
                        self.store.evict_if_idle(tile_block(i, j));
                    }
                }
                comm.all_reduce_sum_vec(&mut y)?;
                Ok(y)
            }
        }
    }

    /// Gathers the full matrix on every rank; used by tests and by the
    /// symmetry diagnostics, not by the iteration hot path.
    pub fn assemble_full(&self, comm: &Communicator) -> Result<DenseMatrix> {
        match self.layout {
            GramLayout::ReplicatedDevice => {
                let lease = self.store.fetch_pooled(FULL_B)?;
                let data = lease.read().clone();
                DenseMatrix::new(self.dim, self.dim, data)
            }
            _ => {
                let mut full = DenseMatrix::zeros(self.dim, self.dim);
                for (&(i, j), ()) in &self.tiles {
                    let lease = self.store.fetch_pooled(tile_block(i, j))?;
                    let t = lease.read();
                    let tile = DenseMatrix::new(self.ranges[i].len(), self.ranges[j].len(), t.clone())?;
                    write_tile(full.data_mut(), self.dim, &tile, &self.ranges[i], &self.ranges[j]);
                }
                comm.all_reduce_sum_mat(&mut full)?;
                Ok(full)
            }
        }
    }

    /// Frees every device/host block held by this Gram result.
    pub fn release(&self) {
        match self.layout {
            GramLayout::ReplicatedDevice => {
                self.store.evict_if_idle(FULL_B);
            }
            _ => {
                for (&(i, j), ()) in &self.tiles {
                    self.store.evict_if_idle(tile_block(i, j));
                    self.store.host_remove(tile_block(i, j));
                }
            }
        }
    }
}

/// Constructs a distributed Gram result directly from externally computed
/// tiles; used by tests that pin down the layout-independence of
/// [`GramResult::matvec`].
pub fn gram_from_tiles(
    dim: usize,
    ranges: Vec<Range<usize>>,
    tiles: Vec<((usize, usize), Vec<f64>)>,
    store: &TieredStore,
) -> Result<GramResult> {
    let mut owned = BTreeMap::new();
    for ((i, j), data) in tiles {
        let lease = store.alloc(tile_block(i, j), data.len())?;
        lease.write().copy_from_slice(&data);
        owned.insert((i, j), ());
    }
    Ok(GramResult {
        dim,
        layout: GramLayout::DistributedDevice,
        store: store.clone(),
        ranges,
        tiles: owned,
        tasks_executed: 0,
        max_concurrent_tasks: 0,
    })
}
