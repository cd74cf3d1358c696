//! Deterministic in-process collectives over N ranks.
//!
//! Every rank runs on its own worker thread and holds one [`Communicator`]
//! handle. Collectives gather all contributions, then fold them in fixed
//! rank order 0→N−1, so results are bitwise identical across runs with the
//! same rank count. A group that sees a shape mismatch or a timeout is
//! poisoned: every outstanding and subsequent call fails rather than hangs.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

/// Default collective timeout; harness faults fail tests instead of hanging.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Monotone counters for the whole group. Byte accounting models each
/// rank's payload traversing one link per collective, so a collective of
/// payload `p` over `N` ranks moves `N·p` bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub all_reduce_calls: u64,
    pub reduce_calls: u64,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    AllReduce,
    Reduce { root: usize },
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PayloadShape {
    Vector(usize),
    Matrix(usize, usize),
    Empty,
}

struct RoundState {
    poisoned: Option<Error>,
    header: Option<(OpKind, PayloadShape)>,
    contributions: Vec<Option<Vec<f64>>>,
    arrived: usize,
    outcome: Option<Arc<Vec<f64>>>,
    departed: usize,
    stats: CommStats,
}

struct Shared {
    size: usize,
    timeout: Duration,
    state: Mutex<RoundState>,
    cv: Condvar,
}

/// Builds the per-rank handles of a new communicator group.
pub struct CommGroup;

impl CommGroup {
    pub fn new(size: usize) -> Result<Vec<Communicator>> {
        Self::with_timeout(size, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(size: usize, timeout: Duration) -> Result<Vec<Communicator>> {
        if size == 0 {
            return Err(Error::Config("communicator group needs at least one rank".into()));
        }
        let shared = Arc::new(Shared {
            size,
            timeout,
            state: Mutex::new(RoundState {
                poisoned: None,
                header: None,
                contributions: (0..size).map(|_| None).collect(),
                arrived: 0,
                outcome: None,
                departed: 0,
                stats: CommStats::default(),
            }),
            cv: Condvar::new(),
        });
        Ok((0..size)
            .map(|rank| Communicator {
                rank,
                shared: Arc::clone(&shared),
            })
            .collect())
    }
}

/// Per-rank handle. Owned by exactly one worker at a time; collectives
/// block the calling worker until every rank of the group participates.
pub struct Communicator {
    rank: usize,
    shared: Arc<Shared>,
}

impl Communicator {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn stats(&self) -> CommStats {
        self.shared.state.lock().unwrap().stats
    }

    /// Every rank receives the elementwise sum, folded in rank order.
    pub fn all_reduce_sum_vec(&self, v: &mut DenseVector) -> Result<()> {
        let shape = PayloadShape::Vector(v.len());
        let data = std::mem::take(v).into_vec();
        let out = self.collective(OpKind::AllReduce, shape, data)?;
        *v = DenseVector::new(out.expect("all-reduce returns on every rank"));
        Ok(())
    }

    pub fn all_reduce_sum_mat(&self, m: &mut DenseMatrix) -> Result<()> {
        let (rows, cols) = (m.rows(), m.cols());
        let shape = PayloadShape::Matrix(rows, cols);
        let data = std::mem::replace(m, DenseMatrix::zeros(1, 1)).into_data();
        let out = self.collective(OpKind::AllReduce, shape, data)?;
        *m = DenseMatrix::new(rows, cols, out.expect("all-reduce returns on every rank"))?;
        Ok(())
    }

    /// Only `root` receives the sum; other ranks' buffers are unchanged.
    pub fn reduce_sum_vec(&self, v: &mut DenseVector, root: usize) -> Result<()> {
        self.check_root(root)?;
        let shape = PayloadShape::Vector(v.len());
        let data = v.as_slice().to_vec();
        if let Some(out) = self.collective(OpKind::Reduce { root }, shape, data)? {
            *v = DenseVector::new(out);
        }
        Ok(())
    }

    pub fn reduce_sum_mat(&self, m: &mut DenseMatrix, root: usize) -> Result<()> {
        self.check_root(root)?;
        let (rows, cols) = (m.rows(), m.cols());
        let shape = PayloadShape::Matrix(rows, cols);
        let data = m.data().to_vec();
        if let Some(out) = self.collective(OpKind::Reduce { root }, shape, data)? {
            *m = DenseMatrix::new(rows, cols, out)?;
        }
        Ok(())
    }

    /// No rank returns before all have entered.
    pub fn barrier(&self) -> Result<()> {
        self.collective(OpKind::Barrier, PayloadShape::Empty, Vec::new())?;
        Ok(())
    }

    fn check_root(&self, root: usize) -> Result<()> {
        if root >= self.shared.size {
            return Err(Error::Config(format!(
                "reduce root {root} out of range for {} ranks",
                self.shared.size
            )));
        }
        Ok(())
    }

    /// Single-round rendezvous: gather N contributions, fold them in rank
    /// order, hand the sum back per the op kind, and recycle the round
    /// once every rank has picked up its result.
    fn collective(
        &self,
        kind: OpKind,
        shape: PayloadShape,
        data: Vec<f64>,
    ) -> Result<Option<Vec<f64>>> {
        let deadline = Instant::now() + self.shared.timeout;
        let shared = &self.shared;
        let mut st = shared.state.lock().unwrap();

        // Wait for the previous round to drain.
        loop {
            if let Some(err) = &st.poisoned {
                return Err(err.clone());
            }
            if st.outcome.is_none() {
                break;
            }
            let (next, timed_out) = self.wait(st, deadline)?;
            st = next;
            if timed_out && st.outcome.is_some() && st.poisoned.is_none() {
                return Err(self.poison_round(&mut st, "previous round never drained"));
            }
        }

        // Join the round, validating against the first arrival's header.
        match &st.header {
            None => st.header = Some((kind, shape)),
            Some((k, s)) => {
                if *k != kind || *s != shape {
                    let err = Error::Collective(format!(
                        "rank {} joined with mismatched op or shape \
                         (expected {:?} {:?}, got {:?} {:?})",
                        self.rank, k, s, kind, shape
                    ));
                    st.poisoned = Some(err.clone());
                    shared.cv.notify_all();
                    return Err(err);
                }
            }
        }
        let payload_len = data.len();
        st.contributions[self.rank] = Some(data);
        st.arrived += 1;

        if st.arrived == shared.size {
            // Fold in fixed rank order for bitwise determinism.
            let mut acc = st.contributions[0].take().expect("rank 0 contributed");
            for r in 1..shared.size {
                let c = st.contributions[r].take().expect("rank contributed");
                for (a, b) in acc.iter_mut().zip(&c) {
                    *a += b;
                }
            }
            match kind {
                OpKind::AllReduce => st.stats.all_reduce_calls += 1,
                OpKind::Reduce { .. } => st.stats.reduce_calls += 1,
                OpKind::Barrier => {}
            }
            st.stats.bytes_moved += (shared.size * payload_len * 8) as u64;
            st.outcome = Some(Arc::new(acc));
            shared.cv.notify_all();
        } else {
            while st.outcome.is_none() {
                if let Some(err) = &st.poisoned {
                    return Err(err.clone());
                }
                let (next, timed_out) = self.wait(st, deadline)?;
                st = next;
                if timed_out && st.outcome.is_none() && st.poisoned.is_none() {
                    return Err(self.poison_round(&mut st, "missing participant"));
                }
            }
            if let Some(err) = &st.poisoned {
                return Err(err.clone());
            }
        }

        let sum = Arc::clone(st.outcome.as_ref().expect("outcome set"));
        st.departed += 1;
        if st.departed == shared.size {
            st.header = None;
            st.arrived = 0;
            st.departed = 0;
            st.outcome = None;
            shared.cv.notify_all();
        }
        drop(st);

        Ok(match kind {
            OpKind::AllReduce => Some(sum.as_ref().clone()),
            OpKind::Reduce { root } if root == self.rank => Some(sum.as_ref().clone()),
            OpKind::Reduce { .. } | OpKind::Barrier => None,
        })
    }

    fn wait<'a>(
        &self,
        st: std::sync::MutexGuard<'a, RoundState>,
        deadline: Instant,
    ) -> Result<(std::sync::MutexGuard<'a, RoundState>, bool)> {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Ok((st, true));
        }
        let (guard, res) = self.shared.cv.wait_timeout(st, remaining).unwrap();
        Ok((guard, res.timed_out()))
    }

    fn poison_round(&self, st: &mut RoundState, why: &str) -> Error {
        let err = Error::Timeout(format!(
            "rank {} timed out after {:?}: {why}",
            self.rank, self.shared.timeout
        ));
        st.poisoned = Some(err.clone());
        self.shared.cv.notify_all();
        err
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn run_ranks<T: Send>(
        comms: Vec<Communicator>,
        f: impl Fn(Communicator) -> T + Sync,
    ) -> Vec<T> {
        thread::scope(|s| {
            let handles: Vec<_> = comms
                .into_iter()
                .map(|c| s.spawn(|| f(c)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn all_reduce_two_ranks() {
        let comms = CommGroup::new(2).unwrap();
        let inputs = [vec![1.0, 2.0], vec![3.0, 4.0]];
        let outs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(inputs[c.rank()].clone());
            c.all_reduce_sum_vec(&mut v).unwrap();
            v
        });
        for v in outs {
            assert_eq!(v.as_slice(), &[4.0, 6.0]);
        }
    }

    #[test]
    fn all_reduce_single_rank_is_identity() {
        let comms = CommGroup::new(1).unwrap();
        let outs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![7.0, -1.0]);
            c.all_reduce_sum_vec(&mut v).unwrap();
            v
        });
        assert_eq!(outs[0].as_slice(), &[7.0, -1.0]);
    }

    #[test]
    fn all_reduce_rank_scaled_ones() {
        let comms = CommGroup::new(4).unwrap();
        let outs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![c.rank() as f64; 3]);
            c.all_reduce_sum_vec(&mut v).unwrap();
            v
        });
        for v in outs {
            assert_eq!(v.as_slice(), &[6.0, 6.0, 6.0]);
        }
    }

    #[test]
    fn reduce_delivers_only_to_root() {
        let comms = CommGroup::new(2).unwrap();
        let outs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![(c.rank() + 1) as f64]);
            c.reduce_sum_vec(&mut v, 1).unwrap();
            v
        });
        assert_eq!(outs[0].as_slice(), &[1.0]); // unchanged
        assert_eq!(outs[1].as_slice(), &[3.0]);
    }

    #[test]
    fn reduce_single_rank_identity() {
        let comms = CommGroup::new(1).unwrap();
        let outs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![5.0]);
            c.reduce_sum_vec(&mut v, 0).unwrap();
            v
        });
        assert_eq!(outs[0].as_slice(), &[5.0]);
    }

    #[test]
    fn out_of_range_root_is_config_error() {
        let comms = CommGroup::new(2).unwrap();
        let errs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![1.0]);
            c.reduce_sum_vec(&mut v, 2)
        });
        for e in errs {
            assert!(matches!(e, Err(Error::Config(_))));
        }
    }

    #[test]
    fn barrier_releases_all_ranks() {
        let comms = CommGroup::new(3).unwrap();
        let outs = run_ranks(comms, |c| {
            if c.rank() == 2 {
                thread::sleep(Duration::from_millis(20));
            }
            c.barrier()
        });
        assert!(outs.into_iter().all(|r| r.is_ok()));
    }

    #[test]
    fn barrier_single_rank_returns_immediately() {
        let comms = CommGroup::new(1).unwrap();
        assert!(comms[0].barrier().is_ok());
    }

    #[test]
    fn missing_participant_times_out() {
        let mut comms = CommGroup::with_timeout(3, Duration::from_millis(100)).unwrap();
        comms.truncate(2); // rank 2 never calls
        let errs = run_ranks(comms, |c| c.barrier());
        for e in errs {
            assert!(matches!(e, Err(Error::Timeout(_))), "got {e:?}");
        }
    }

    #[test]
    fn shape_mismatch_fails_all_ranks() {
        let comms = CommGroup::with_timeout(2, Duration::from_secs(5)).unwrap();
        let errs = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![0.0; 2 + c.rank()]);
            c.all_reduce_sum_vec(&mut v)
        });
        for e in errs {
            assert!(e.is_err(), "got {e:?}");
        }
    }

    #[test]
    fn all_reduce_matches_reduce_at_root_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..17).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let comms = CommGroup::new(4).unwrap();
        let ins = &inputs;
        let ar = run_ranks(comms, move |c| {
            let mut v = DenseVector::new(ins[c.rank()].clone());
            c.all_reduce_sum_vec(&mut v).unwrap();
            v
        });

        let comms = CommGroup::new(4).unwrap();
        let rd = run_ranks(comms, move |c| {
            let mut v = DenseVector::new(ins[c.rank()].clone());
            c.reduce_sum_vec(&mut v, 2).unwrap();
            v
        });

        // Exact equality: both fold contributions in the same rank order.
        assert_eq!(ar[2].as_slice(), rd[2].as_slice());
        for r in ar.iter().skip(1) {
            assert_eq!(r.as_slice(), ar[0].as_slice());
        }
    }

    #[test]
    fn repeated_rounds_are_deterministic() {
        let run = || {
            let comms = CommGroup::new(3).unwrap();
            run_ranks(comms, |c| {
                let mut acc = DenseVector::new(vec![0.1 * (c.rank() as f64 + 1.0); 5]);
                for _ in 0..50 {
                    c.all_reduce_sum_vec(&mut acc).unwrap();
                    for x in acc.as_mut_slice() {
                        *x *= 1e-2; // keep values bounded across rounds
                    }
                }
                acc
            })
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_slice(), y.as_slice(), "bitwise repeatability");
        }
    }

    #[test]
    fn byte_accounting_lower_bound() {
        let comms = CommGroup::new(2).unwrap();
        let payload = 33usize;
        let rounds = 7usize;
        let stats = run_ranks(comms, |c| {
            let mut v = DenseVector::new(vec![1.0; payload]);
            for _ in 0..rounds {
                c.all_reduce_sum_vec(&mut v).unwrap();
            }
            c.stats()
        });
        let s = stats[0];
        assert_eq!(s.all_reduce_calls, rounds as u64);
        assert!(s.bytes_moved >= (rounds * payload * 8) as u64);
        assert_eq!(s.bytes_moved, (2 * rounds * payload * 8) as u64);
    }
}
