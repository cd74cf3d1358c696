//! Driver-level checks of both decomposition paths against independent
//! oracles.

use oomsvd_core::linalg::{frobenius_error, CsrMatrix, DenseMatrix, MatRef};
use oomsvd_core::runner::{run_decomposition, RunSettings};
use oomsvd_core::svd::{SvdConfig, SvdPath};
use oomsvd_oracle as oracle;

fn tight_config(k: i64) -> SvdConfig {
    SvdConfig {
        k,
        eps: 1e-12,
        seed: 7,
        ..SvdConfig::default()
    }
}

fn settings(workers: usize, n_b: usize, q_s: usize) -> RunSettings {
    RunSettings {
        workers,
        n_b,
        q_s,
        ..RunSettings::default()
    }
}

#[test]
fn dense_diagonal_recovers_exact_factors() {
    let a = DenseMatrix::from_diagonal(3, 3, &[3.0, 2.0, 1.0]);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(3), &settings(1, 1, 1)).unwrap();
    let f = out.factors.unwrap();
    let s = f.sigma.as_slice();
    assert!((s[0] - 3.0).abs() < 1e-9, "{s:?}");
    assert!((s[1] - 2.0).abs() < 1e-9);
    assert!((s[2] - 1.0).abs() < 1e-9);
    // U and V are the identity up to column signs; the sign convention
    // pins the positive orientation.
    for t in 0..3 {
        assert!((f.v.at(t, t).abs() - 1.0).abs() < 1e-6);
        assert!((f.u.at(t, t).abs() - 1.0).abs() < 1e-6);
        assert!(f.v.at(t, t) > 0.0, "sign convention");
    }
}

#[test]
fn zero_matrix_exhausts_rank_immediately() {
    let a = DenseMatrix::zeros(4, 3);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(2), &settings(1, 1, 1)).unwrap();
    let f = out.factors.unwrap();
    assert_eq!(f.k, 0);
    assert_eq!(out.reports[0].truncated_at, Some(0));
}

#[test]
fn dense_path_matches_jacobi_oracle() {
    let sigma = oracle::geometric_spectrum(10, 8.0, 1.3);
    let a = oracle::matrix_with_spectrum(32, 24, &sigma, 11);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(8), &settings(1, 2, 1)).unwrap();
    let f = out.factors.unwrap();
    let (ju, js, jv) = oracle::jacobi_svd(&a);
    for t in 0..8 {
        let got = f.sigma.as_slice()[t];
        assert!(
            (got - js[t]).abs() <= 1e-6 * js[t],
            "sigma[{t}]: {got} vs {}",
            js[t]
        );
        let gv = f.v.column(t).into_vec();
        let jvc = jv.column(t).into_vec();
        assert!(
            oracle::matches_up_to_sign(&gv, &jvc, 1e-5),
            "v[{t}] mismatch"
        );
        let gu = f.u.column(t).into_vec();
        let juc = ju.column(t).into_vec();
        assert!(
            oracle::matches_up_to_sign(&gu, &juc, 1e-5),
            "u[{t}] mismatch"
        );
    }
}

#[test]
fn wide_input_is_decomposed_through_its_transpose() {
    let sigma = oracle::geometric_spectrum(6, 5.0, 1.4);
    let a = oracle::matrix_with_spectrum(24, 32, &sigma, 13);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(4), &settings(2, 2, 1)).unwrap();
    let f = out.factors.unwrap();
    assert_eq!(f.u.rows(), 24);
    assert_eq!(f.v.rows(), 32);
    let (_, js, _) = oracle::jacobi_svd(&a);
    for t in 0..4 {
        assert!((f.sigma.as_slice()[t] - js[t]).abs() <= 1e-6 * js[t]);
    }
    // Pairing: A v ≈ σ u.
    for t in 0..4 {
        let av = a.matvec(&f.v.column(t)).unwrap();
        let s = f.sigma.as_slice()[t];
        for (x, u) in av.as_slice().iter().zip(f.u.column(t).as_slice()) {
            assert!((x - s * u).abs() <= 1e-6 * js[0]);
        }
    }
}

#[test]
fn sparse_diagonal_spectrum() {
    let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 5.0), (1, 1, 3.0)]).unwrap();
    let out = run_decomposition(MatRef::Csr(&a), &tight_config(2), &settings(1, 1, 1)).unwrap();
    assert_eq!(out.effective_path, SvdPath::ResidualFree);
    let f = out.factors.unwrap();
    assert!((f.sigma.as_slice()[0] - 5.0).abs() < 1e-9);
    assert!((f.sigma.as_slice()[1] - 3.0).abs() < 1e-9);
}

#[test]
fn sparse_path_matches_densified_oracle() {
    let triplets = oracle::random_sparse_triplets(200, 150, (200.0 * 150.0 * 0.05) as usize, 17);
    let a = CsrMatrix::from_triplets(200, 150, triplets).unwrap();
    let out = run_decomposition(MatRef::Csr(&a), &tight_config(10), &settings(2, 2, 2)).unwrap();
    let f = out.factors.unwrap();
    let (_, js, _) = oracle::jacobi_svd(&a.to_dense());
    for t in 0..10 {
        let got = f.sigma.as_slice()[t];
        assert!(
            (got - js[t]).abs() <= 1e-5 * js[t],
            "sigma[{t}]: {got} vs {}",
            js[t]
        );
    }
}

#[test]
fn paths_agree_on_the_same_input() {
    let triplets = oracle::random_sparse_triplets(60, 45, 300, 23);
    let a = CsrMatrix::from_triplets(60, 45, triplets).unwrap();
    let dense = a.to_dense();
    let cfg = tight_config(6);
    let s = settings(1, 2, 1);
    let via_gram = run_decomposition(MatRef::Dense(&dense), &cfg, &s).unwrap();
    let via_residual_free = run_decomposition(MatRef::Csr(&a), &cfg, &s).unwrap();
    assert_eq!(via_gram.effective_path, SvdPath::DenseGram);
    assert_eq!(via_residual_free.effective_path, SvdPath::ResidualFree);
    let fg = via_gram.factors.unwrap();
    let fr = via_residual_free.factors.unwrap();
    for t in 0..6 {
        let a = fg.sigma.as_slice()[t];
        let b = fr.sigma.as_slice()[t];
        assert!((a - b).abs() <= 1e-8 * a.max(b), "sigma[{t}]: {a} vs {b}");
        assert!(oracle::matches_up_to_sign(
            fg.v.column(t).as_slice(),
            fr.v.column(t).as_slice(),
            1e-6
        ));
        assert!(oracle::matches_up_to_sign(
            fg.u.column(t).as_slice(),
            fr.u.column(t).as_slice(),
            1e-6
        ));
    }
}

#[test]
fn pairing_ordering_and_orthogonality() {
    let sigma = oracle::geometric_spectrum(8, 6.0, 1.15);
    let a = oracle::matrix_with_spectrum(40, 28, &sigma, 31);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(8), &settings(2, 2, 2)).unwrap();
    let f = out.factors.unwrap();
    let s = f.sigma.as_slice();
    let s1 = s[0];
    for t in 0..8 {
        // Pairing identity ‖Av − σu‖ ≤ 1e-6·σ1.
        let av = a.matvec(&f.v.column(t)).unwrap();
        let mut err: f64 = 0.0;
        for (x, u) in av.as_slice().iter().zip(f.u.column(t).as_slice()) {
            err += (x - s[t] * u) * (x - s[t] * u);
        }
        assert!(err.sqrt() <= 1e-6 * s1, "pairing error {} at {t}", err.sqrt());
        // Ordering with 1e-9 slack.
        if t > 0 {
            assert!(s[t] <= s[t - 1] + 1e-9);
        }
    }
    // Orthogonality: max off-diagonal of UᵀU and VᵀV.
    for (mat, dim) in [(&f.u, 8), (&f.v, 8)] {
        for i in 0..dim {
            for j in 0..dim {
                let dot: f64 = (0..mat.rows()).map(|r| mat.at(r, i) * mat.at(r, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() <= 1e-6,
                    "gram[{i},{j}] = {dot} off by more than 1e-6"
                );
            }
        }
    }
}

#[test]
fn fixed_worker_rerun_is_bitwise_identical() {
    let a = oracle::random_dense(24, 18, 3);
    let cfg = tight_config(5);
    let s = settings(2, 2, 2);
    let one = run_decomposition(MatRef::Dense(&a), &cfg, &s).unwrap();
    let two = run_decomposition(MatRef::Dense(&a), &cfg, &s).unwrap();
    let (f1, f2) = (one.factors.unwrap(), two.factors.unwrap());
    assert_eq!(f1.sigma.as_slice(), f2.sigma.as_slice());
    assert_eq!(f1.u.data(), f2.u.data());
    assert_eq!(f1.v.data(), f2.v.data());
}

#[test]
fn sigma_agrees_across_worker_counts() {
    let a = oracle::random_dense(32, 20, 41);
    let cfg = tight_config(6);
    let mut previous: Option<Vec<f64>> = None;
    for workers in [1usize, 2, 4] {
        let out =
            run_decomposition(MatRef::Dense(&a), &cfg, &settings(workers, 2, 1)).unwrap();
        let sigma = out.factors.unwrap().sigma.into_vec();
        if let Some(prev) = &previous {
            for (x, y) in sigma.iter().zip(prev) {
                assert!((x - y).abs() <= 1e-10, "workers={workers}: {x} vs {y}");
            }
        }
        previous = Some(sigma);
    }
}

#[test]
fn non_convergence_is_reported_not_fatal() {
    let a = oracle::random_dense(16, 12, 5);
    let cfg = SvdConfig {
        k: 2,
        eps: 1e-15,
        max_iter: 2,
        seed: 1,
        ..SvdConfig::default()
    };
    let out = run_decomposition(MatRef::Dense(&a), &cfg, &settings(1, 1, 1)).unwrap();
    let report = &out.reports[0];
    assert_eq!(report.components.len(), 2);
    assert!(report.components.iter().any(|c| !c.converged));
    assert!(report.components.iter().all(|c| c.iterations <= 2));
}

#[test]
fn rank_deficient_input_truncates() {
    let sigma = [4.0, 2.0];
    let a = oracle::matrix_with_spectrum(12, 10, &sigma, 19);
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(5), &settings(1, 1, 1)).unwrap();
    let f = out.factors.unwrap();
    assert_eq!(f.k, 2, "only two components exist");
    assert_eq!(out.reports[0].truncated_at, Some(2));
    assert!((f.sigma.as_slice()[0] - 4.0).abs() < 1e-6);
    assert!((f.sigma.as_slice()[1] - 2.0).abs() < 1e-6);
}

#[test]
fn reconstruction_error_decreases_with_rank() {
    let a = oracle::random_dense(24, 24, 77);
    let norm = a.frobenius_norm();
    let mut last = f64::INFINITY;
    for k in [1i64, 4, 8, 16, 24] {
        let out =
            run_decomposition(MatRef::Dense(&a), &tight_config(k), &settings(1, 1, 1)).unwrap();
        let f = out.factors.unwrap();
        let err = frobenius_error(MatRef::Dense(&a), &f).unwrap();
        assert!(
            err <= last + 1e-9,
            "error rose from {last} to {err} at k={k}"
        );
        last = err;
        if k == 24 {
            assert!(err <= 1e-6 * norm, "full-rank error {err} vs {}", 1e-6 * norm);
        }
    }
}

#[test]
fn sparse_path_never_allocates_a_dense_intermediate() {
    let triplets = oracle::random_sparse_triplets(300, 240, 720, 29);
    let a = CsrMatrix::from_triplets(300, 240, triplets).unwrap();
    let out = run_decomposition(MatRef::Csr(&a), &tight_config(4), &settings(1, 4, 1)).unwrap();
    let dense_bytes = (300 * 240 * 8) as u64;
    for st in &out.store_stats {
        assert!(
            st.peak_device_used < dense_bytes / 4,
            "peak {} suggests a dense intermediate ({} would be full)",
            st.peak_device_used,
            dense_bytes
        );
    }
}

#[test]
fn dense_degree_one_budget_is_respected_and_correct() {
    let sigma = oracle::geometric_spectrum(4, 3.0, 1.5);
    let a = oracle::matrix_with_spectrum(48, 32, &sigma, 37);
    // s_svd = 4·48·32·8 = 49152 B; give less to force degree 1.
    let s = RunSettings {
        workers: 2,
        n_b: 4,
        q_s: 2,
        device_budget: 24_000,
        ..RunSettings::default()
    };
    let out = run_decomposition(MatRef::Dense(&a), &tight_config(3), &s).unwrap();
    assert_eq!(
        out.assessment.degree,
        oomsvd_core::partition::OomDegree::Degree1
    );
    for st in &out.store_stats {
        assert!(st.peak_device_used <= st.device_budget);
        assert!(st.d2h_count > 0 || st.h2d_count > 0);
    }
    let f = out.factors.unwrap();
    for t in 0..3 {
        assert!(
            (f.sigma.as_slice()[t] - sigma[t]).abs() <= 1e-6 * sigma[t],
            "sigma[{t}] {} vs {}",
            f.sigma.as_slice()[t],
            sigma[t]
        );
    }
}
