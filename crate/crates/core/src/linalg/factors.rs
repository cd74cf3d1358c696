//! Truncated factor triplet and reconstruction-error metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dense::{DenseMatrix, DenseVector};
use crate::linalg::MatRef;

/// Truncated SVD output: `A ≈ U diag(sigma) Vᵀ` with rank `k`.
///
/// Singular values are non-negative and non-increasing; `U` is `m×k`,
/// `V` is `n×k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub sigma: DenseVector,
    pub v: DenseMatrix,
    pub k: usize,
}

impl SvdFactors {
    pub fn new(u: DenseMatrix, sigma: DenseVector, v: DenseMatrix) -> Result<Self> {
        let k = sigma.len();
        if u.cols() != k || v.cols() != k {
            return Err(Error::Shape(format!(
                "factor widths {} and {} do not match {} singular values",
                u.cols(),
                v.cols(),
                k
            )));
        }
        let s = sigma.as_slice();
        for i in 0..k {
            if s[i] < 0.0 {
                return Err(Error::Numeric(format!(
                    "singular value {i} is negative: {}",
                    s[i]
                )));
            }
            if i > 0 && s[i] > s[i - 1] + 1e-9 {
                return Err(Error::Numeric(format!(
                    "singular values out of order at {i}: {} > {}",
                    s[i],
                    s[i - 1]
                )));
            }
        }
        Ok(Self { u, sigma, v, k })
    }

    /// Row `i` of the reconstruction `U diag(sigma) Vᵀ`, an `n`-vector.
    /// Only `k`-length intermediates plus the output row are allocated.
    fn reconstructed_row(&self, i: usize, out: &mut [f64]) {
        out.fill(0.0);
        if self.k == 0 {
            return;
        }
        let urow = self.u.row(i);
        let s = self.sigma.as_slice();
        for t in 0..self.k {
            let w = urow[t] * s[t];
            if w == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * self.v.at(j, t);
            }
        }
    }
}

/// `‖A − U diag(sigma) Vᵀ‖_F`, accumulated row by row so the dense
/// residual is never materialized (one `n`-length scratch row only).
pub fn frobenius_error(a: MatRef<'_>, factors: &SvdFactors) -> Result<f64> {
    let (m, n) = (a.rows(), a.cols());
    if factors.k > 0 && (factors.u.rows() != m || factors.v.rows() != n) {
        return Err(Error::Shape(format!(
            "factors for {}x{} applied to {m}x{n} input",
            factors.u.rows(),
            factors.v.rows()
        )));
    }
    let mut scratch = vec![0.0f64; n];
    let mut total = 0.0f64;
    for i in 0..m {
        factors.reconstructed_row(i, &mut scratch);
        match a {
            MatRef::Dense(d) => {
                for (x, r) in d.row(i).iter().zip(&scratch) {
                    let diff = x - r;
                    total += diff * diff;
                }
            }
            MatRef::Csr(s) => {
                // Residual row = sparse row minus dense reconstruction row.
                let mut row_sum: f64 = scratch.iter().map(|r| r * r).sum();
                for (c, v) in s.row_entries(i) {
                    let r = scratch[c];
                    row_sum += (v - r) * (v - r) - r * r;
                }
                total += row_sum;
            }
        }
    }
    // Cancellation in the sparse branch can leave a tiny negative sum.
    Ok(total.max(0.0).sqrt())
}

/// Empty factor set for an `m×n` problem (rank 0).
pub fn empty_factors(m: usize, n: usize) -> SvdFactors {
    SvdFactors {
        u: DenseMatrix::zeros(m, 1),
        sigma: DenseVector::new(vec![]),
        v: DenseMatrix::zeros(n, 1),
        k: 0,
    }
}
