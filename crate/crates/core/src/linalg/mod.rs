//! Dense and CSR matrix/vector kernels used by every other module.
//!
//! All arithmetic is in 64-bit floats. Kernels are pure functions over
//! immutable inputs and safe to call concurrently from many workers.

mod csr;
mod dense;
mod factors;

pub use csr::CsrMatrix;
pub use dense::{DenseMatrix, DenseVector};
pub use factors::{empty_factors, frobenius_error, SvdFactors};

use crate::error::Result;

/// Borrowed dense-or-sparse operand, letting drivers and the residual-free
/// kernels run on either representation.
#[derive(Debug, Clone, Copy)]
pub enum MatRef<'a> {
    Dense(&'a DenseMatrix),
    Csr(&'a CsrMatrix),
}

impl<'a> MatRef<'a> {
    pub fn rows(&self) -> usize {
        match self {
            MatRef::Dense(m) => m.rows(),
            MatRef::Csr(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            MatRef::Dense(m) => m.cols(),
            MatRef::Csr(m) => m.cols(),
        }
    }

    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        match self {
            MatRef::Dense(m) => m.matvec(v),
            MatRef::Csr(m) => m.matvec(v),
        }
    }

    pub fn matvec_transposed(&self, v: &DenseVector) -> Result<DenseVector> {
        match self {
            MatRef::Dense(m) => m.matvec_transposed(v),
            MatRef::Csr(m) => m.matvec_transposed(v),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            MatRef::Dense(m) => m.frobenius_norm(),
            MatRef::Csr(m) => m.values().iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}
