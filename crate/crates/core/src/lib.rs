//! Distributed out-of-memory truncated SVD engine.
//!
//! The engine computes `A ≈ U diag(σ) Vᵀ` by power iteration with
//! deflation, over workers that each own a contiguous slab of the input.
//! Two execution paths share the same driver skeleton:
//!
//! * a dense path that materializes the deflated residual blockwise and
//!   runs a batched, distributed Gram product ([`gram`]), and
//! * a residual-free path for sparse inputs that applies the deflated
//!   Gram to a vector through a four-term matrix-vector expansion
//!   ([`svd::residual`]), never allocating a dense `m×n` or `n×n`
//!   intermediate.
//!
//! Device memory is modeled by a two-tier block store with a hard byte
//! budget ([`store`]); cross-worker reductions run over deterministic
//! in-process collectives ([`comm`]), so a run with a fixed worker count
//! is bitwise reproducible.

pub mod comm;
pub mod error;
pub mod generate;
pub mod gram;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod partition;
pub mod runner;
pub mod store;
pub mod svd;

pub use error::{Error, Result};
pub use linalg::{CsrMatrix, DenseMatrix, DenseVector, MatRef, SvdFactors};
