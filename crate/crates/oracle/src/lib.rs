//! Independent desk-scale oracles for verifying the decomposition engine.
//!
//! Everything in this crate is test support: a one-sided Jacobi SVD, a
//! brute-force residual-Gram application, and constructors for matrices
//! with a prescribed spectrum. None of it shares algorithms with the
//! engine under test — the Jacobi SVD never touches a power iteration,
//! and the residual oracle materializes the dense residual the engine is
//! required to avoid.

use oomsvd_core::linalg::{DenseMatrix, DenseVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Full SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Returns `(U, sigma, V)` with `A = U diag(sigma) Vᵀ`, singular values
/// sorted in non-increasing order. `A` may be any shape; wide inputs are
/// handled by decomposing the transpose and swapping the factors.
pub fn jacobi_svd(a: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    if a.rows() < a.cols() {
        let (u, s, v) = jacobi_svd_tall(&a.transposed());
        return (v, s, u);
    }
    jacobi_svd_tall(a)
}

fn jacobi_svd_tall(a: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    let (m, n) = (a.rows(), a.cols());
    assert!(m >= n);
    // Column-major working copies so rotations touch contiguous memory.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).into_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = 1e-15;
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                for r in 0..m {
                    alpha += w[p][r] * w[p][r];
                    beta += w[q][r] * w[q][r];
                    gamma += w[p][r] * w[q][r];
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wp = w[p][r];
                    let wq = w[q][r];
                    w[p][r] = c * wp - s * wq;
                    w[q][r] = s * wp + c * wq;
                }
                for r in 0..n {
                    let vp = v[p][r];
                    let vq = v[q][r];
                    v[p][r] = c * vp - s * vq;
                    v[q][r] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = DenseMatrix::zeros(m, n);
    let mut vv = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..m {
                u.set(r, dst, w[src][r] / s);
            }
        }
        for r in 0..n {
            vv.set(r, dst, v[src][r]);
        }
    }
    (u, sigma, vv)
}

/// Random matrix with entries from the standard normal distribution.
pub fn random_dense(m: usize, n: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DenseMatrix::new(m, n, data).unwrap()
}

/// Random matrix with orthonormal columns (Gaussian + two-pass
/// Gram-Schmidt). Requires `cols ≤ rows`.
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    assert!(cols <= rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols_v: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cols_v.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _pass in 0..2 {
            for q in &cols_v {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, qx) in v.iter_mut().zip(q) {
                    *x -= dot * qx;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // resample a degenerate draw
        }
        for x in &mut v {
            *x /= norm;
        }
        cols_v.push(v);
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for (j, c) in cols_v.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Geometric spectrum `sigma[i] = first / ratio^i`, giving a uniform gap
/// ratio between consecutive singular values.
pub fn geometric_spectrum(k: usize, first: f64, ratio: f64) -> Vec<f64> {
    (0..k).map(|i| first / ratio.powi(i as i32)).collect()
}

/// Builds `A = U diag(sigma) Vᵀ` from freshly drawn orthonormal factors,
/// i.e. a matrix whose exact SVD is known by construction.
pub fn matrix_with_spectrum(m: usize, n: usize, sigma: &[f64], seed: u64) -> DenseMatrix {
    let r = sigma.len();
    assert!(r <= m.min(n));
    let u = orthonormal_columns(m, r, seed.wrapping_mul(2).wrapping_add(1));
    let v = orthonormal_columns(n, r, seed.wrapping_mul(2).wrapping_add(2));
    let mut a = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..r {
                acc += u.at(i, t) * sigma[t] * v.at(j, t);
            }
            a.set(i, j, acc);
        }
    }
    a
}

/// Dense deflated residual `X − U diag(sigma) Vᵀ`, materialized in full.
pub fn explicit_residual(
    x: &DenseMatrix,
    u: &DenseMatrix,
    sigma: &[f64],
    v: &DenseMatrix,
) -> DenseMatrix {
    let mut r = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut acc = 0.0;
            for (t, &s) in sigma.iter().enumerate() {
                acc += u.at(i, t) * s * v.at(j, t);
            }
            r.set(i, j, r.at(i, j) - acc);
        }
    }
    r
}

/// Brute-force Gram of the deflated residual: `(X−UΣVᵀ)ᵀ(X−UΣVᵀ)`.
pub fn explicit_residual_gram(
    x: &DenseMatrix,
    u: &DenseMatrix,
    sigma: &[f64],
    v: &DenseMatrix,
) -> DenseMatrix {
    let r = explicit_residual(x, u, sigma, v);
    r.transposed().matmul(&r).unwrap()
}

/// Brute-force application of the deflated residual Gram to a vector.
pub fn explicit_residual_gram_matvec(
    x: &DenseMatrix,
    u: &DenseMatrix,
    sigma: &[f64],
    v: &DenseMatrix,
    v0: &DenseVector,
) -> DenseVector {
    explicit_residual_gram(x, u, sigma, v).matvec(v0).unwrap()
}

/// True when `a` and `b` agree elementwise up to a single global sign.
pub fn matches_up_to_sign(a: &[f64], b: &[f64], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    a.iter().zip(b).all(|(x, y)| (x - s * y).abs() <= tol)
}

/// Random sparse triplets: exactly `nnz` distinct coordinates with
/// standard-normal values.
pub fn random_sparse_triplets(
    m: usize,
    n: usize,
    nnz: usize,
    seed: u64,
) -> Vec<(usize, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = rand::seq::index::sample(&mut rng, m * n, nnz);
    cells
        .into_iter()
        .map(|cell| {
            let r = cell / n;
            let c = cell % n;
            (r, c, StandardNormal.sample(&mut rng))
        })
        .collect()
}
