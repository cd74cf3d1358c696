//! Truncated SVD via power iteration with deflation.

mod driver;
pub mod power;
pub mod residual;

use serde::{Deserialize, Serialize};

pub use driver::{svd_truncated_dense, svd_truncated_sparse, SvdOutput};
pub use power::{svd_1d, IterControl, PowerOutcome};
pub use residual::{dist_compute_v, residual_gram_apply, v_batch_block, VBatches};

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::partition::{BatchPlan, OomAssessment, PartitionPlan};
use crate::store::TieredStore;

/// Which decomposition route to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdPath {
    /// Explicit blockwise residual + distributed Gram (dense inputs).
    DenseGram,
    /// Four-term residual-free applications (sparse inputs).
    ResidualFree,
    /// Pick by input representation.
    Auto,
}

impl std::str::FromStr for SvdPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-gram" => Ok(SvdPath::DenseGram),
            "residual-free" => Ok(SvdPath::ResidualFree),
            "auto" => Ok(SvdPath::Auto),
            other => Err(Error::Config(format!(
                "unknown path `{other}` (expected dense-gram, residual-free or auto)"
            ))),
        }
    }
}

impl std::fmt::Display for SvdPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SvdPath::DenseGram => "dense-gram",
            SvdPath::ResidualFree => "residual-free",
            SvdPath::Auto => "auto",
        })
    }
}

/// Decomposition parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdConfig {
    /// Target rank; `-1` resolves to `min(m, n)`.
    pub k: i64,
    /// Convergence tolerance for the power iteration.
    pub eps: f64,
    /// Iteration cap per singular vector.
    pub max_iter: usize,
    /// Benchmark mode: run exactly this many iterations per vector with
    /// the convergence check disabled.
    pub fixed_iters: Option<usize>,
    /// Seed for the per-component start vectors (component `l` draws from
    /// `seed + l`).
    pub seed: u64,
    pub path: SvdPath,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            k: -1,
            eps: 1e-10,
            max_iter: 10_000,
            fixed_iters: None,
            seed: 0,
            path: SvdPath::Auto,
        }
    }
}

impl SvdConfig {
    /// Validates the configuration against a concrete shape and resolves
    /// the `-1` rank sentinel.
    pub fn resolve_k(&self, m: usize, n: usize) -> Result<usize> {
        if self.fixed_iters.is_none() && !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!(
                "eps must lie in (0, 1), got {}",
                self.eps
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.fixed_iters == Some(0) {
            return Err(Error::Config("fixed iteration count must be at least 1".into()));
        }
        let min_dim = m.min(n);
        match self.k {
            -1 => Ok(min_dim),
            k if k < 1 => Err(Error::Config(format!("rank {k} must be -1 or positive"))),
            k if k as usize > min_dim => Err(Error::Config(format!(
                "rank {k} exceeds min(m, n) = {min_dim}"
            ))),
            k => Ok(k as usize),
        }
    }
}

/// Per-component progress of the deflation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub iterations: usize,
    pub converged: bool,
    /// `|v0·v1|` at the last iteration.
    pub final_alignment: f64,
    pub sigma: f64,
}

/// Summary of one decomposition run on one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub components: Vec<ComponentReport>,
    /// Set when the input ran out of rank before `k` components: the
    /// number of valid components actually returned.
    pub truncated_at: Option<usize>,
    pub wall_time_s: f64,
}

impl IterationReport {
    pub fn total_iterations(&self) -> usize {
        self.components.iter().map(|c| c.iterations).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.components.iter().all(|c| c.converged)
    }
}

/// Everything one rank needs to run a decomposition.
pub struct WorkerContext {
    pub comm: Communicator,
    pub store: TieredStore,
    pub plan: PartitionPlan,
    pub batches: BatchPlan,
    pub assessment: OomAssessment,
}
