//! Residual-free kernels against the brute-force residual-Gram oracle.

use oomsvd_core::comm::CommGroup;
use oomsvd_core::linalg::{DenseMatrix, DenseVector, MatRef};
use oomsvd_core::partition::{choose_partition, plan_batches, BatchOrientation};
use oomsvd_core::store::TieredStore;
use oomsvd_core::svd::{dist_compute_v, residual_gram_apply, v_batch_block, VBatches};
use oomsvd_oracle as oracle;

/// Random instance: matrix, exactly-orthonormalized deflation factors
/// (the four-term identity requires UᵀU = I) and a unit start vector.
struct Instance {
    x: DenseMatrix,
    u: DenseMatrix,
    sigma: Vec<f64>,
    v: DenseMatrix,
    v0: DenseVector,
}

fn instance(m: usize, n: usize, l: usize, seed: u64) -> Instance {
    let x = oracle::random_dense(m, n, seed);
    let u = if l > 0 {
        oracle::orthonormal_columns(m, l, seed + 1)
    } else {
        DenseMatrix::zeros(m, 1)
    };
    let v = if l > 0 {
        oracle::orthonormal_columns(n, l, seed + 2)
    } else {
        DenseMatrix::zeros(n, 1)
    };
    let sigma: Vec<f64> = (0..l).map(|i| 4.0 / (i as f64 + 1.0)).collect();
    let v0 = oracle::random_dense(n, 1, seed + 3)
        .column(0)
        .normalized()
        .unwrap();
    Instance { x, u, sigma, v, v0 }
}

fn columns(m: &DenseMatrix, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|j| m.column(j).into_vec()).collect()
}

#[test]
fn serial_apply_matches_explicit_oracle() {
    for seed in 0..20u64 {
        let l = (seed % 6) as usize; // 0..=5 deflated components
        let inst = instance(10 + (seed % 5) as usize * 4, 7 + (seed % 3) as usize * 5, l, seed);
        let got = residual_gram_apply(
            MatRef::Dense(&inst.x),
            &columns(&inst.u, l),
            &inst.sigma,
            &columns(&inst.v, l),
            &inst.v0,
        )
        .unwrap();
        let want = oracle::explicit_residual_gram_matvec(
            &inst.x, &inst.u, &inst.sigma, &inst.v, &inst.v0,
        );
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() <= 1e-10, "seed {seed}: {g} vs {w}");
        }
    }
}

/// Runs dist_compute_v over `ranks` workers with host-staged V batches
/// and returns rank 0's result.
fn run_distributed(inst: &Instance, ranks: usize, n_b: usize, q_s: usize) -> DenseVector {
    let (m, n) = (inst.x.rows(), inst.x.cols());
    let l = inst.sigma.len();
    let plan = choose_partition(m, n, ranks).unwrap();
    let batches = plan_batches(&plan, BatchOrientation::Orthogonal, n_b, q_s).unwrap();
    let comms = CommGroup::new(ranks).unwrap();
    let outs: Vec<DenseVector> = std::thread::scope(|scope| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|comm| {
                let plan = plan.clone();
                let batches = batches.clone();
                scope.spawn(move || {
                    let slab_range = plan.slab(comm.rank());
                    let x_slab = inst.x.row_slab(slab_range.start, slab_range.end).unwrap();
                    let u_slab: Vec<Vec<f64>> = (0..l)
                        .map(|t| {
                            (slab_range.clone())
                                .map(|r| inst.u.at(r, t))
                                .collect()
                        })
                        .collect();
                    let store = TieredStore::new(1 << 26);
                    // Stage V into the host tier as the degree-1 driver would.
                    for (j, range) in batches.ranges_for_rank(comm.rank()).iter().enumerate() {
                        let rows = range.len();
                        let mut block = vec![0.0f64; rows * l];
                        for t in 0..l {
                            for (r, row) in range.clone().enumerate() {
                                block[r * l + t] = inst.v.at(row, t);
                            }
                        }
                        store.host_put(v_batch_block(j), &block).unwrap();
                    }
                    dist_compute_v(
                        MatRef::Dense(&x_slab),
                        &u_slab,
                        &inst.sigma,
                        &VBatches::Staged { l },
                        &inst.v0,
                        &batches,
                        &comm,
                        &store,
                    )
                    .unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for o in outs.iter().skip(1) {
        assert_eq!(o.as_slice(), outs[0].as_slice(), "ranks must agree bitwise");
    }
    outs.into_iter().next().unwrap()
}

#[test]
fn distributed_apply_matches_oracle_over_grid() {
    let mut cases = 0;
    for seed in 0..6u64 {
        let l = (seed % 6) as usize;
        let inst = instance(24, 16, l, 100 + seed);
        let want = oracle::explicit_residual_gram_matvec(
            &inst.x, &inst.u, &inst.sigma, &inst.v, &inst.v0,
        );
        for ranks in [1usize, 2, 4] {
            for n_b in [1usize, 2, 4] {
                for q_s in [1usize, 2] {
                    let got = run_distributed(&inst, ranks, n_b, q_s);
                    for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                        assert!(
                            (g - w).abs() <= 1e-10,
                            "seed {seed} N={ranks} n_b={n_b} q_s={q_s}: {g} vs {w}"
                        );
                    }
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 6 * 18);
}

#[test]
fn four_term_expansion_equals_explicit_gram_as_matrices() {
    // Column-by-column comparison of the operator against the dense
    // residual Gram, on exactly-orthonormalized factors.
    for seed in [3u64, 8, 21] {
        let l = 3;
        let inst = instance(12, 9, l, seed);
        let explicit = oracle::explicit_residual_gram(&inst.x, &inst.u, &inst.sigma, &inst.v);
        for j in 0..9 {
            let mut e = vec![0.0; 9];
            e[j] = 1.0;
            let col = residual_gram_apply(
                MatRef::Dense(&inst.x),
                &columns(&inst.u, l),
                &inst.sigma,
                &columns(&inst.v, l),
                &DenseVector::new(e),
            )
            .unwrap();
            for (i, g) in col.as_slice().iter().enumerate() {
                assert!(
                    (g - explicit.at(i, j)).abs() <= 1e-10,
                    "seed {seed} entry ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn csr_operand_matches_dense_operand() {
    let triplets = oracle::random_sparse_triplets(30, 20, 120, 55);
    let sparse = oomsvd_core::linalg::CsrMatrix::from_triplets(30, 20, triplets).unwrap();
    let dense = sparse.to_dense();
    let l = 2;
    let u = oracle::orthonormal_columns(30, l, 56);
    let v = oracle::orthonormal_columns(20, l, 57);
    let sigma = vec![2.0, 1.0];
    let v0 = oracle::random_dense(20, 1, 58).column(0).normalized().unwrap();
    let a = residual_gram_apply(
        MatRef::Csr(&sparse),
        &columns(&u, l),
        &sigma,
        &columns(&v, l),
        &v0,
    )
    .unwrap();
    let b = residual_gram_apply(
        MatRef::Dense(&dense),
        &columns(&u, l),
        &sigma,
        &columns(&v, l),
        &v0,
    )
    .unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() <= 1e-12);
    }
}
