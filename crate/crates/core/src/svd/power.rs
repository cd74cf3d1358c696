//! Single-vector power iteration over a symmetric PSD operator action.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

/// Loop controls for one power iteration.
#[derive(Debug, Clone)]
pub struct IterControl {
    /// Convergence tolerance: stop once `|v0·v1| ≥ 1 − eps`.
    pub eps: f64,
    pub max_iter: usize,
    /// Run exactly this many iterations with the convergence check
    /// disabled (benchmark mode).
    pub fixed_iters: Option<usize>,
}

/// Outcome of one power iteration run.
#[derive(Debug, Clone)]
pub struct PowerOutcome {
    pub vector: DenseVector,
    pub iterations: usize,
    pub converged: bool,
    /// `|v0·v1|` at the final iteration.
    pub final_alignment: f64,
    /// `‖Bv‖` at the final iteration; near convergence this estimates
    /// the dominant eigenvalue of the applied operator.
    pub operator_norm: f64,
}

/// Iterates `v ← B v / ‖B v‖` from a seeded standard-normal start until
/// successive iterates align within `eps`, the iteration cap is reached,
/// or the pinned iteration count (benchmark mode) completes.
///
/// `apply` must be the action of a symmetric positive semidefinite
/// operator (a Gram action); the iterate converges to its dominant
/// eigenvector. A zero iterate means the operator annihilates the current
/// vector — reported as degenerate input so drivers can translate it into
/// rank exhaustion.
pub fn svd_1d(
    mut apply: impl FnMut(&DenseVector) -> Result<DenseVector>,
    dim: usize,
    control: &IterControl,
    seed: u64,
) -> Result<PowerOutcome> {
    if dim == 0 {
        return Err(Error::Config("operator dimension must be positive".into()));
    }
    if control.fixed_iters.is_none() && !(control.eps > 0.0 && control.eps < 1.0) {
        return Err(Error::Config(format!(
            "eps must lie in (0, 1), got {}",
            control.eps
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut v0 = DenseVector::new(start).normalized()?;

    let limit = control.fixed_iters.unwrap_or(control.max_iter).max(1);
    let check_convergence = control.fixed_iters.is_none();
    let mut alignment = 0.0;
    let mut operator_norm = 0.0;
    let mut converged = false;
    let mut prev_step: Option<f64> = None;

    for it in 1..=limit {
        let y = apply(&v0)?;
        if y.len() != dim {
            return Err(Error::Shape(format!(
                "operator returned length {} for dimension {dim}",
                y.len()
            )));
        }
        if !y.is_finite() {
            return Err(Error::Numeric(
                "operator produced a non-finite iterate".into(),
            ));
        }
        let norm = y.norm2();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(
                "operator annihilated the iterate (zero vector)".into(),
            ));
        }
        operator_norm = norm;
        let v1 = y.normalized()?;
        alignment = v0.dot(&v1)?.abs();
        v0 = v1;

        if check_convergence && alignment >= 1.0 - control.eps {
            converged = true;
        }
        if converged {
            // Alignment of successive iterates lags the alignment to the
            // true eigenvector by the contraction ratio ρ: the remaining
            // error is about step/(1−ρ). Estimate ρ from the last two
            // angular steps and keep polishing until the extrapolated
            // error is comfortably below the √(2·eps) the caller asked
            // for, or the steps stop shrinking (precision floor).
            let step = (2.0 * (1.0 - alignment)).max(0.0).sqrt();
            let stalled = prev_step.is_some_and(|p| step >= p);
            let rho = match prev_step {
                Some(p) if p > 0.0 => (step / p).min(0.99),
                _ => 0.5,
            };
            let target = (1.0 - rho) * (2.0 * control.eps).sqrt() * 0.05;
            if step <= target || step == 0.0 || stalled {
                return Ok(PowerOutcome {
                    vector: v0,
                    iterations: it,
                    converged: true,
                    final_alignment: alignment,
                    operator_norm,
                });
            }
            prev_step = Some(step);
        } else {
            prev_step = Some((2.0 * (1.0 - alignment)).max(0.0).sqrt());
        }
    }

    Ok(PowerOutcome {
        vector: v0,
        iterations: limit,
        converged,
        final_alignment: alignment,
        operator_norm,
    })
}
