//! Evaluation metrics.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{TargetSpec, TaskSample, TaskSampler};
use crate::oracles::finetune_target;
use crate::seed::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSnapshot {
    pub er: f64,
    pub test_mse: f64,
    /// NaN when no ground truth is available.
    pub sin_angle: f64,
    pub dis_similarity: f64,
    pub design_trace: f64,
    pub long_term_tasks: usize,
    pub cumulative_budget: usize,
}

/// Fine-tune-and-test evaluation data for one seed. Drawing it once and
/// reusing it for every checkpoint and strategy keeps comparisons paired.
#[derive(Debug, Clone)]
pub struct TargetEvalSet {
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl TargetEvalSet {
    /// `n_target` fine-tuning and `n_test` test draws from the target mixture.
    pub fn draw(sampler: &dyn TaskSampler, target: &TargetSpec, n_test: usize, stream: SeedStream) -> Result<Self> {
        let train = draw_mixture(sampler, target, target.n_target, stream.child(0))?;
        let test = draw_mixture(sampler, target, n_test, stream.child(1))?;
        Ok(Self { train, test })
    }
}

/// Pooled draws from `ν_target`: first assign each draw a target, then sample
/// every target's share in one batch.
pub fn draw_mixture(sampler: &dyn TaskSampler, target: &TargetSpec, n: usize, stream: SeedStream) -> Result<Vec<TaskSample>> {
    let assign = target.draw_assignments(n, &mut stream.child(0).rng());
    let mut counts = vec![0usize; target.targets.len()];
    for i in assign {
        counts[i] += 1;
    }
    let mut out = Vec::new();
    for (i, (w, &c)) in target.targets.iter().zip(&counts).enumerate() {
        if c > 0 {
            let mut rng = stream.child(1 + i as u64).rng();
            out.push(sampler.sample_target(w, c, &mut rng)?);
        }
    }
    Ok(out)
}

/// Fine-tuned head on the target set, and the `(er, test_mse)` it achieves.
pub fn excess_risk(b_x_hat: &DMatrix<f64>, sampler: &dyn TaskSampler, eval: &TargetEvalSet, ridge: f64) -> Result<(f64, f64)> {
    let psi_x = sampler.psi_x();
    let w_avg = finetune_target(b_x_hat, psi_x, &eval.train, ridge)?;
    let coef = b_x_hat * w_avg;
    let mut sse = 0.0;
    let mut n = 0usize;
    for s in &eval.test {
        let phi = psi_x.apply_rows(&s.inputs)?;
        sse += (phi * &coef - &s.labels).norm_squared();
        n += s.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let test_mse = sse / n as f64;
    let sigma = sampler.noise_sigma();
    Ok(((test_mse - sigma * sigma).max(0.0), test_mse))
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Mismatch {
            expected: a.len(),
            got: b.len(),
            context: "subspace bases",
        });
    }
    Ok(())
}

/// Sine of the largest principal angle, `‖(I − BBᵀ) B̂‖₂`.
pub fn sin_angle(b_hat: &DMatrix<f64>, b_true: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(b_hat, b_true)?;
    let resid = b_hat - b_true * b_true.tr_mul(b_hat);
    Ok(linalg::spectral_norm(&resid).clamp(0.0, 1.0))
}

/// `min_i ‖u_iᵀ Û‖₂`: how well the worst column of `U` is captured by `Û`.
pub fn dis_similarity(u: &DMatrix<f64>, u_hat: &DMatrix<f64>) -> Result<f64> {
    if u.ncols() != u_hat.ncols() || u.nrows() != u_hat.nrows() {
        return Err(Error::Mismatch {
            expected: u.ncols(),
            got: u_hat.ncols(),
            context: "subspace bases",
        });
    }
    let proj = u.tr_mul(u_hat);
    Ok(proj
        .row_iter()
        .map(|r| r.norm())
        .fold(f64::INFINITY, f64::min)
        .clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignTrace {
    /// `+∞` when the moment matrix is singular.
    pub value: f64,
    pub rank: usize,
}

/// `Tr((B Σ n_w w wᵀ Bᵀ)⁻¹ B E[w₀w₀ᵀ] Bᵀ)`.
pub fn design_trace(b_w: &DMatrix<f64>, counts: &[(DVector<f64>, f64)], target_cov: &DMatrix<f64>) -> Result<DesignTrace> {
    let d = b_w.ncols();
    if target_cov.shape() != (d, d) {
        return Err(Error::Mismatch {
            expected: d,
            got: target_cov.nrows(),
            context: "target covariance",
        });
    }
    let mut moment = DMatrix::zeros(d, d);
    for (w, n) in counts {
        if w.len() != d {
            return Err(Error::Mismatch {
                expected: d,
                got: w.len(),
                context: "task vector",
            });
        }
        moment.ger(*n, w, w, 1.0);
    }
    let m = linalg::symmetrize(&(b_w * moment * b_w.transpose()));
    let k = m.nrows();
    let rank = linalg::numerical_rank(&m, 1e-12);
    if rank < k {
        return Ok(DesignTrace {
            value: f64::INFINITY,
            rank,
        });
    }
    let Some(ch) = Cholesky::new(m) else {
        return Ok(DesignTrace {
            value: f64::INFINITY,
            rank,
        });
    };
    let a = b_w * target_cov * b_w.transpose();
    Ok(DesignTrace {
        value: ch.solve(&a).trace(),
        rank,
    })
}

/// Tasks whose cumulative budget reaches `eps^{-alpha}`.
pub fn long_term_task_count(budgets: &[usize], alpha: f64, eps: f64) -> usize {
    let threshold = eps.powf(-alpha);
    budgets.iter().filter(|&&n| n as f64 >= threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_rotation(theta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let r = DMatrix::from_column_slice(3, 1, &[theta.cos(), theta.sin(), 0.0]);
        (b, r)
    }

    #[test]
    fn sin_angle_of_rotation() {
        for theta in [0.0, 0.3, 1.0, std::f64::consts::FRAC_PI_2] {
            let (b, r) = plane_rotation(theta);
            assert!((sin_angle(&r, &b).unwrap() - theta.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn dis_of_rotation() {
        let u = DMatrix::<f64>::identity(3, 2);
        let t: f64 = 0.7;
        let u_hat = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, t.cos(), 0.0, t.sin()]);
        assert!((dis_similarity(&u, &u_hat).unwrap() - t.cos()).abs() < 1e-12);
        assert!((dis_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = DMatrix::<f64>::identity(3, 2);
        let b = DMatrix::<f64>::identity(4, 2);
        assert!(sin_angle(&a, &b).is_err());
    }

    #[test]
    fn isotropic_design_trace() {
        let k = 3;
        let n = 50.0;
        let counts: Vec<(DVector<f64>, f64)> = (0..k)
            .map(|i| {
                let mut e = DVector::zeros(k);
                e[i] = 1.0;
                (e, n)
            })
            .collect();
        let t = design_trace(&DMatrix::identity(k, k), &counts, &DMatrix::identity(k, k)).unwrap();
        assert!((t.value - k as f64 / n).abs() < 1e-12);
        let t = design_trace(&DMatrix::identity(k, k), &counts[..2], &DMatrix::identity(k, k)).unwrap();
        assert!(t.value.is_infinite());
        assert_eq!(t.rank, 2);
    }

    #[test]
    fn task_count_thresholds() {
        assert_eq!(long_term_task_count(&[1, 4, 16], 1.0, 0.25), 2);
        assert_eq!(long_term_task_count(&[1, 4, 16], 1.0, 0.0), 0);
    }
}
