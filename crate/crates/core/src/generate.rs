//! Deterministic test-matrix generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DenseMatrix};

/// Dense matrix with standard-normal entries, deterministic in `seed`.
pub fn gen_dense(m: usize, n: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DenseMatrix::new(m, n, data).expect("positive dimensions")
}

/// Sparse matrix with exactly `round(density·m·n)` standard-normal
/// entries at distinct coordinates sampled without replacement.
pub fn gen_sparse(m: usize, n: usize, density: f64, seed: u64) -> Result<CsrMatrix> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let cells = (m as u128) * (n as u128);
    if cells > usize::MAX as u128 {
        return Err(Error::Config(format!(
            "{m}x{n} has more cells than the index type can address"
        )));
    }
    let nnz = (density * m as f64 * n as f64).round() as usize;
    if nnz == 0 {
        return Err(Error::Config(format!(
            "density {density} realizes zero nonzeros for a {m}x{n} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, m * n, nnz);
    let entries = picked
        .into_iter()
        .map(|cell| (cell / n, cell % n, StandardNormal.sample(&mut rng)))
        .collect();
    CsrMatrix::from_triplets(m, n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_generation_is_deterministic() {
        assert_eq!(gen_dense(8, 8, 1), gen_dense(8, 8, 1));
        assert_ne!(gen_dense(8, 8, 1), gen_dense(8, 8, 2));
    }

    #[test]
    fn sparse_realizes_the_rounded_count() {
        let m = gen_sparse(100, 100, 0.01, 3).unwrap();
        assert_eq!(m.nnz(), 100);
        let m = gen_sparse(10, 10, 0.126, 3).unwrap();
        assert_eq!(m.nnz(), 13);
    }

    #[test]
    fn zero_density_is_a_config_error() {
        assert!(matches!(
            gen_sparse(10, 10, 0.0, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen_sparse(10, 10, 1.5, 1),
            Err(Error::Config(_))
        ));
    }
}
