//! Compressed sparse row storage and kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dense::{DenseMatrix, DenseVector};

/// Sparse matrix in CSR form. Column indices are strictly increasing
/// within each row, which also rules out duplicate entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if row_ptr.len() != rows + 1 {
            return Err(Error::Shape(format!(
                "row_ptr length {} does not match rows {rows} + 1",
                row_ptr.len()
            )));
        }
        if row_ptr[0] != 0 || row_ptr[rows] != values.len() || col_idx.len() != values.len() {
            return Err(Error::Shape(
                "row_ptr endpoints must be 0 and nnz, with col_idx matching values".into(),
            ));
        }
        for w in row_ptr.windows(2) {
            if w[0] > w[1] {
                return Err(Error::Shape("row_ptr must be non-decreasing".into()));
            }
        }
        for r in 0..rows {
            let mut prev: Option<usize> = None;
            for &c in &col_idx[row_ptr[r]..row_ptr[r + 1]] {
                if c >= cols {
                    return Err(Error::Shape(format!(
                        "column index {c} out of bounds for {cols} columns"
                    )));
                }
                if let Some(p) = prev {
                    if c <= p {
                        return Err(Error::Shape(format!(
                            "column indices must be strictly increasing within row {r} \
                             (duplicates are rejected)"
                        )));
                    }
                }
                prev = Some(c);
            }
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds CSR from (row, col, value) triplets. Entries may arrive in
    /// any order; duplicate coordinates are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) out of bounds for {rows}x{cols}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::Shape(format!("duplicate entry at ({r}, {c})")));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self::new(rows, cols, row_ptr, col_idx, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entries of row `r` as (column, value) pairs.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `y = M v`.
    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "matvec of {}x{} with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let x = v.as_slice();
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *o = acc;
        }
        Ok(DenseVector::new(out))
    }

    /// `y = Mᵀ v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &DenseVector) -> Result<DenseVector> {
        if self.rows != v.len() {
            return Err(Error::Shape(format!(
                "transposed matvec of {}x{} with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let x = v.as_slice();
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[p]] += self.values[p] * xr;
            }
        }
        Ok(DenseVector::new(out))
    }

    /// Materialized transpose, used once per run when the engine flips a
    /// wide problem into its tall mirror.
    pub fn transposed(&self) -> CsrMatrix {
        let mut row_ptr = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            row_ptr[c + 1] += 1;
        }
        for c in 0..self.cols {
            row_ptr[c + 1] += row_ptr[c];
        }
        let mut cursor = row_ptr.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0f64; self.nnz()];
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[p];
                let slot = cursor[c];
                col_idx[slot] = r;
                values[slot] = self.values[p];
                cursor[c] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Copy of the row slab `[r0, r1)` as its own CSR matrix.
    pub fn row_slab(&self, r0: usize, r1: usize) -> Result<CsrMatrix> {
        if r0 >= r1 || r1 > self.rows {
            return Err(Error::Shape(format!(
                "row slab [{r0}, {r1}) out of bounds for {} rows",
                self.rows
            )));
        }
        let base = self.row_ptr[r0];
        let end = self.row_ptr[r1];
        let row_ptr = self.row_ptr[r0..=r1].iter().map(|p| p - base).collect();
        CsrMatrix::new(
            r1 - r0,
            self.cols,
            row_ptr,
            self.col_idx[base..end].to_vec(),
            self.values[base..end].to_vec(),
        )
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Bytes of the CSR representation itself (values + indices + offsets).
    pub fn storage_bytes(&self) -> u64 {
        (self.values.len() * 8 + self.col_idx.len() * 8 + self.row_ptr.len() * 8) as u64
    }
}
