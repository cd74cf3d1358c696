//! Partition orientation, batch geometry and OOM-degree planning.
//!
//! Pure planning functions: given the matrix shape, worker count and the
//! per-worker device budget, decide how the work is partitioned across
//! ranks, how each rank batches its local data, and which arrays live on
//! the device tier versus the host tier.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ELEM_BYTES: u64 = 8;

/// Which axis is split across ranks. Column partition is used only when
/// `n > m`; ties resolve to row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionAxis {
    Row,
    Column,
}

/// Whether batches run along the partitioned axis or across it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchOrientation {
    Collinear,
    Orthogonal,
}

/// Dense input, or sparse with the given nonzero density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MatrixKind {
    Dense,
    Sparse { density: f64 },
}

impl MatrixKind {
    pub fn is_sparse(&self) -> bool {
        matches!(self, MatrixKind::Sparse { .. })
    }
}

/// Shape-level description of a decomposition problem, as needed by the
/// memory estimator and the OOM classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub kind: MatrixKind,
}

/// How the rows (or columns) of the input are split across ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub workers: usize,
    pub axis: PartitionAxis,
    /// Per-rank contiguous index range along the partitioned axis.
    pub slabs: Vec<Range<usize>>,
    pub m: usize,
    pub n: usize,
}

impl PartitionPlan {
    pub fn slab(&self, rank: usize) -> Range<usize> {
        self.slabs[rank].clone()
    }

    /// Length of the partitioned axis.
    pub fn partitioned_len(&self) -> usize {
        match self.axis {
            PartitionAxis::Row => self.m,
            PartitionAxis::Column => self.n,
        }
    }

    /// Length of the axis that stays whole on every rank; this is also
    /// the Gram dimension.
    pub fn cross_len(&self) -> usize {
        match self.axis {
            PartitionAxis::Row => self.n,
            PartitionAxis::Column => self.m,
        }
    }

    pub fn max_slab_len(&self) -> usize {
        self.slabs.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Batch geometry for one rank's local data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_b: usize,
    /// Largest batch length along the batched axis.
    pub b_s: usize,
    pub orientation: BatchOrientation,
    pub q_s: usize,
    /// Set when the requested queue size exceeded `n_b` and was clamped.
    pub q_s_clamped: bool,
    /// Batch ranges over the batched axis. Orthogonal plans share these
    /// ranges across ranks; collinear plans key them per rank.
    ranges: BatchRanges,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum BatchRanges {
    Shared(Vec<Range<usize>>),
    PerRank(Vec<Vec<Range<usize>>>),
}

impl BatchPlan {
    pub fn ranges_for_rank(&self, rank: usize) -> &[Range<usize>] {
        match &self.ranges {
            BatchRanges::Shared(r) => r,
            BatchRanges::PerRank(per) => &per[rank],
        }
    }
}

/// Storage tier assignment for one array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Device,
    Host,
}

/// Where each logical array lives during the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub a: Tier,
    pub u: Tier,
    pub sigma: Tier,
    pub v: Tier,
    pub b: Tier,
}

impl Placement {
    pub const ALL_DEVICE: Placement = Placement {
        a: Tier::Device,
        u: Tier::Device,
        sigma: Tier::Device,
        v: Tier::Device,
        b: Tier::Device,
    };
}

/// How the Gram matrix is laid out across ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramLayout {
    /// Full copy on every rank, resident on device.
    ReplicatedDevice,
    /// Row-slab tiles per rank, resident on device.
    DistributedDevice,
    /// Row-slab tiles per rank, staged to the host between uses.
    DistributedHost,
}

/// OOM complexity degree. Degree 2 never appears in a successful plan;
/// the classifier fails instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OomDegree {
    Degree0,
    Degree1,
}

/// Memory estimate plus the tier placement that makes the problem fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OomAssessment {
    /// Dense footprint of the input in bytes (8 bytes per element,
    /// regardless of sparse storage).
    pub s_a: u64,
    /// Estimated decomposition working set in bytes.
    pub s_svd: u64,
    pub degree: OomDegree,
    pub placement: Placement,
    pub gram_layout: GramLayout,
    /// Bytes pinned on device for the whole run under this placement.
    pub device_floor: u64,
    /// Finest transferable block of the host-placed arrays.
    pub min_tile_bytes: u64,
}

/// Splits `len` indices into `parts` contiguous ranges as evenly as
/// possible, spreading the remainder over the low ranks.
pub fn even_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Picks the partition axis from the matrix shape and splits it across
/// `workers` ranks. Column partition only when `n > m`.
pub fn choose_partition(m: usize, n: usize, workers: usize) -> Result<PartitionPlan> {
    if m == 0 || n == 0 || workers == 0 {
        return Err(Error::Config(format!(
            "matrix shape {m}x{n} and worker count {workers} must all be positive"
        )));
    }
    let axis = if n > m {
        PartitionAxis::Column
    } else {
        PartitionAxis::Row
    };
    let axis_len = match axis {
        PartitionAxis::Row => m,
        PartitionAxis::Column => n,
    };
    if workers > axis_len {
        return Err(Error::Config(format!(
            "{workers} workers exceed the partitioned axis length {axis_len}"
        )));
    }
    Ok(PartitionPlan {
        workers,
        axis,
        slabs: even_ranges(axis_len, workers),
        m,
        n,
    })
}

/// Dense-footprint and working-set estimate: the working set is four
/// input footprints for dense inputs and two dense footprints for sparse
/// inputs (the residual of a sparse input is dense).
pub fn estimate_memory(shape: &ProblemShape) -> (u64, u64) {
    let s_a = shape.m as u64 * shape.n as u64 * ELEM_BYTES;
    let s_svd = match shape.kind {
        MatrixKind::Dense => 4 * s_a,
        MatrixKind::Sparse { .. } => 2 * s_a,
    };
    (s_a, s_svd)
}

/// Estimated bytes of one rank's CSR slab.
pub fn csr_slab_bytes(shape: &ProblemShape, slab_len: usize, cross_len: usize) -> u64 {
    let density = match shape.kind {
        MatrixKind::Sparse { density } => density,
        MatrixKind::Dense => 1.0,
    };
    let nnz = (density * slab_len as f64 * cross_len as f64).ceil() as u64;
    nnz * 16 + (slab_len as u64 + 1) * ELEM_BYTES
}

/// Assigns every array to a tier, given the per-worker device budget.
///
/// Degree 0 when the whole working set fits on device. Degree 1 places
/// the input (if dense) and the heavy replicated cofactor (`V` under a
/// row partition, `U` under a column partition) on the host; the pinned
/// device floor plus two of the finest transfer tiles must then fit.
/// Anything tighter is degree 2 and fails.
pub fn classify_oom(
    shape: &ProblemShape,
    plan: &PartitionPlan,
    device_budget: u64,
) -> Result<OomAssessment> {
    if device_budget == 0 {
        return Err(Error::Config("device budget must be positive".into()));
    }
    let (s_a, s_svd) = estimate_memory(shape);
    let slab = plan.max_slab_len() as u64;
    let cross = plan.cross_len() as u64;
    let k = shape.k as u64;

    if s_svd <= device_budget {
        return Ok(OomAssessment {
            s_a,
            s_svd,
            degree: OomDegree::Degree0,
            placement: Placement::ALL_DEVICE,
            gram_layout: GramLayout::ReplicatedDevice,
            device_floor: s_svd,
            min_tile_bytes: 0,
        });
    }

    // Degree-1 candidate placement.
    let local_slab_bytes = if shape.kind.is_sparse() {
        csr_slab_bytes(shape, slab as usize, cross as usize)
    } else {
        0 // dense input stays on host, batched in per tile
    };
    let narrow_cofactor = slab * k * ELEM_BYTES; // U under row partition
    let iter_vectors = (4 * cross + slab) * ELEM_BYTES;
    let sigma_bytes = k * ELEM_BYTES;
    let device_floor = local_slab_bytes + narrow_cofactor + sigma_bytes + iter_vectors;

    // Finest tiles of the host-placed arrays: one column of the local
    // input slab (dense path) or one row of the replicated cofactor.
    let input_tile = if shape.kind.is_sparse() {
        0
    } else {
        slab * ELEM_BYTES
    };
    let cofactor_tile = k.max(1) * ELEM_BYTES;
    let min_tile_bytes = input_tile.max(cofactor_tile);

    if device_floor + 2 * min_tile_bytes > device_budget {
        return Err(Error::Degree2(format!(
            "device floor {device_floor} B plus two {min_tile_bytes} B tiles exceeds \
             the {device_budget} B budget; no batching schedule fits"
        )));
    }

    let heavy_cofactor_on_host = true; // defining property of degree 1
    let placement = match (plan.axis, shape.kind.is_sparse()) {
        (PartitionAxis::Row, true) => Placement {
            a: Tier::Device,
            u: Tier::Device,
            sigma: Tier::Device,
            v: Tier::Host,
            b: Tier::Device,
        },
        (PartitionAxis::Row, false) => Placement {
            a: Tier::Host,
            u: Tier::Device,
            sigma: Tier::Device,
            v: Tier::Host,
            b: Tier::Device,
        },
        (PartitionAxis::Column, true) => Placement {
            a: Tier::Device,
            u: Tier::Host,
            sigma: Tier::Device,
            v: Tier::Device,
            b: Tier::Device,
        },
        (PartitionAxis::Column, false) => Placement {
            a: Tier::Host,
            u: Tier::Host,
            sigma: Tier::Device,
            v: Tier::Device,
            b: Tier::Device,
        },
    };
    debug_assert!(heavy_cofactor_on_host);

    // Gram layout for the dense path: replicate when a full copy fits
    // beside the floor, fall back to device slabs, then to host staging.
    let b_full = cross * cross * ELEM_BYTES;
    let b_slab = cross.div_ceil(plan.workers as u64) * cross * ELEM_BYTES;
    let headroom = device_budget - device_floor;
    let (gram_layout, placement) = if b_full + 2 * min_tile_bytes <= headroom {
        (GramLayout::ReplicatedDevice, placement)
    } else if b_slab + 2 * min_tile_bytes <= headroom {
        (GramLayout::DistributedDevice, placement)
    } else {
        (
            GramLayout::DistributedHost,
            Placement {
                b: Tier::Host,
                ..placement
            },
        )
    };

    Ok(OomAssessment {
        s_a,
        s_svd,
        degree: OomDegree::Degree1,
        placement,
        gram_layout,
        device_floor,
        min_tile_bytes,
    })
}

/// Lays out `n_b` batches over the batched axis and clamps the task-queue
/// size to the batch count.
pub fn plan_batches(
    plan: &PartitionPlan,
    orientation: BatchOrientation,
    n_b: usize,
    q_s: usize,
) -> Result<BatchPlan> {
    if n_b == 0 || q_s == 0 {
        return Err(Error::Config(format!(
            "batch count {n_b} and queue size {q_s} must be positive"
        )));
    }
    let (ranges, b_s) = match orientation {
        BatchOrientation::Orthogonal => {
            let axis_len = plan.cross_len();
            if n_b > axis_len {
                return Err(Error::Config(format!(
                    "{n_b} batches exceed the batched axis length {axis_len}"
                )));
            }
            let r = even_ranges(axis_len, n_b);
            let b_s = r.iter().map(|x| x.len()).max().unwrap_or(0);
            (BatchRanges::Shared(r), b_s)
        }
        BatchOrientation::Collinear => {
            let min_slab = plan.slabs.iter().map(|r| r.len()).min().unwrap_or(0);
            if n_b > min_slab {
                return Err(Error::Config(format!(
                    "{n_b} batches exceed the smallest local slab length {min_slab}"
                )));
            }
            let per: Vec<Vec<Range<usize>>> = plan
                .slabs
                .iter()
                .map(|slab| {
                    even_ranges(slab.len(), n_b)
                        .into_iter()
                        .map(|r| slab.start + r.start..slab.start + r.end)
                        .collect()
                })
                .collect();
            let b_s = per
                .iter()
                .flat_map(|v| v.iter().map(|r| r.len()))
                .max()
                .unwrap_or(0);
            (BatchRanges::PerRank(per), b_s)
        }
    };
    let q_s_clamped = q_s > n_b;
    Ok(BatchPlan {
        n_b,
        b_s,
        orientation,
        q_s: q_s.min(n_b),
        q_s_clamped,
        ranges,
    })
}
