//! Sampling-design solvers.
//!
//! Three routes to a source-task distribution: the closed-form eigen-clipped
//! construction on the unit ball, Frank-Wolfe over a finite candidate set, and
//! a shrinking-ball random search for nonlinear task lifts.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, max_asymmetry, sym_eig_desc};
use crate::model::{FeatureOperator, TaskSpace};

/// Tolerance on symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Relative singular-value cutoff below which a map counts as rank deficient.
pub const RANK_TOL: f64 = 1e-8;

/// Eigenpairs of a target covariance that survived clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedEig {
    /// `k × m`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// Descending.
    pub values: DVector<f64>,
    pub gamma: f64,
}

impl ClippedEig {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `u_i √λ_i` for each retained pair.
    pub fn scaled(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i) * self.values[i].max(0.0).sqrt()
    }
}

pub fn clip_target_covariance(sigma_hat: &DMatrix<f64>, gamma: f64) -> Result<ClippedEig> {
    if !sigma_hat.is_square() {
        return Err(Error::Mismatch {
            expected: sigma_hat.nrows(),
            got: sigma_hat.ncols(),
            context: "target covariance",
        });
    }
    let asym = max_asymmetry(sigma_hat);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let (values, vectors) = sym_eig_desc(sigma_hat);
    let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] >= gamma && values[i] > 0.0).collect();
    let k = sigma_hat.nrows();
    let mut u = DMatrix::zeros(k, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        u.set_column(dst, &vectors.column(src));
    }
    Ok(ClippedEig {
        vectors: u,
        values: DVector::from_iterator(keep.len(), keep.iter().map(|&i| values[i])),
        gamma,
    })
}

/// Minimum-norm preimages of the clipped eigen-directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BallSolution {
    /// `d × m`: column `i` is `B̂ᵀ(B̂B̂ᵀ)⁻¹ u_i √λ_i`.
    pub w_prime: DMatrix<f64>,
    /// Columns of `w_prime` pulled back onto the unit ball where needed.
    pub tasks: Vec<DVector<f64>>,
}

impl BallSolution {
    pub fn max_norm_sq(&self) -> f64 {
        self.w_prime.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max)
    }
}

pub fn solve_ball_closed_form(b_hat: &DMatrix<f64>, clipped: &ClippedEig) -> Result<BallSolution> {
    let k = b_hat.nrows();
    if clipped.vectors.nrows() != k {
        return Err(Error::Mismatch {
            expected: k,
            got: clipped.vectors.nrows(),
            context: "clipped eigenvectors",
        });
    }
    let d = b_hat.ncols();
    if d < k {
        return Err(Error::RankDeficient { sigma_min: 0.0, tol: 0.0 });
    }
    let svd = linalg::svd_sorted(b_hat);
    let smax = svd.s[0];
    let smin = svd.s[k - 1];
    let tol = RANK_TOL * smax;
    if !(smin > tol) {
        return Err(Error::RankDeficient { sigma_min: smin, tol });
    }
    // B̂⁺ = V S⁻¹ Uᵀ equals B̂ᵀ(B̂B̂ᵀ)⁻¹ at full row rank.
    let s_inv = DMatrix::from_diagonal(&svd.s.map(|s| 1.0 / s));
    let pinv = &svd.v * s_inv * svd.u.transpose();
    let m = clipped.len();
    let mut w_prime = DMatrix::zeros(d, m);
    let mut tasks = Vec::with_capacity(m);
    for i in 0..m {
        let rhs = clipped.scaled(i);
        let w = &pinv * &rhs;
        let resid = (b_hat * &w - &rhs).norm();
        if resid > 1e-8 * (1.0 + rhs.norm()) {
            return Err(Error::Diverged(format!(
                "min-norm preimage misses its constraint by {resid:.3e}"
            )));
        }
        tasks.push(crate::model::project_to_ball(&w));
        w_prime.set_column(i, &w);
    }
    Ok(BallSolution { w_prime, tasks })
}

/// `ceil(m · β₃ · max_i ‖w′_i‖² · ε⁻²)`; zero when there is nothing to sample.
pub fn budget_target_aware(solution: &BallSolution, eps: f64, beta3: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy must be positive, got {eps}")));
    }
    let m = solution.w_prime.ncols();
    if m == 0 {
        return Ok(0);
    }
    Ok(ceil_budget(m as f64 * beta3 * solution.max_norm_sq() / (eps * eps)))
}

/// Ceiling that ignores floating-point fuzz just above an integer.
pub fn ceil_budget(x: f64) -> usize {
    if !(x > 0.0) {
        return 0;
    }
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// A finite source-task distribution together with its sample allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub epoch: usize,
    pub stage: usize,
    pub tasks: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub total_budget: usize,
    pub per_task_budget: Vec<usize>,
}

impl SamplingPlan {
    /// Uniform weights; every task gets `ceil(total / m)` samples.
    pub fn uniform_ceil(epoch: usize, stage: usize, tasks: Vec<DVector<f64>>, total: usize) -> Self {
        let m = tasks.len();
        let each = if m == 0 { 0 } else { total.div_ceil(m) };
        Self {
            epoch,
            stage,
            weights: vec![1.0 / m.max(1) as f64; m],
            per_task_budget: vec![each; m],
            tasks,
            total_budget: total,
        }
    }

    /// Uniform weights with an exact split: the first `total mod m` tasks get
    /// one extra sample.
    pub fn uniform_exact(epoch: usize, stage: usize, tasks: Vec<DVector<f64>>, total: usize) -> Self {
        let m = tasks.len();
        let (base, extra) = if m == 0 { (0, 0) } else { (total / m, total % m) };
        Self {
            epoch,
            stage,
            weights: vec![1.0 / m.max(1) as f64; m],
            per_task_budget: (0..m).map(|i| base + usize::from(i < extra)).collect(),
            tasks,
            total_budget: total,
        }
    }

    /// Arbitrary weights; each task gets `ceil(weight · total)`.
    pub fn weighted_ceil(epoch: usize, stage: usize, tasks: Vec<DVector<f64>>, weights: Vec<f64>, total: usize) -> Self {
        let per_task_budget = weights.iter().map(|&p| ceil_budget(p * total as f64)).collect();
        Self {
            epoch,
            stage,
            tasks,
            weights,
            total_budget: total,
            per_task_budget,
        }
    }

    pub fn spent(&self) -> usize {
        self.per_task_budget.iter().sum()
    }
}

/// Write plans as `epoch,stage,task_index,budget,w_0,…` rows.
pub fn write_plans_csv(path: &Path, plans: &[SamplingPlan]) -> Result<()> {
    let dim = plans.iter().flat_map(|p| p.tasks.first()).map(|w| w.len()).next().unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "epoch,stage,task_index,budget")?;
    for i in 0..dim {
        write!(out, ",w_{i}")?;
    }
    writeln!(out)?;
    for plan in plans {
        for (i, (w, n)) in plan.tasks.iter().zip(&plan.per_task_budget).enumerate() {
            write!(out, "{},{},{},{}", plan.epoch, plan.stage, i, n)?;
            for x in w.iter() {
                write!(out, ",{x:?}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `Σ q_i f_i f_iᵀ`.
pub fn moment_matrix(features: &[DVector<f64>], weights: &[f64]) -> DMatrix<f64> {
    let k = features[0].len();
    let mut m = DMatrix::zeros(k, k);
    for (f, &q) in features.iter().zip(weights) {
        if q != 0.0 {
            m.ger(q, f, f, 1.0);
        }
    }
    linalg::symmetrize(&m)
}

/// Generalized eigenpairs `A v = λ M v`, `vᵀ M v = 1`, descending.
fn generalized_eig(m: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let ch = Cholesky::new(m.clone())?;
    let l = ch.l();
    let l_inv = l.clone().try_inverse()?;
    let c = &l_inv * a * l_inv.transpose();
    let (vals, z) = sym_eig_desc(&c);
    let v = l_inv.transpose() * z;
    Some((vals, v))
}

/// `λ_max(M(q)⁻¹ A)`; `+∞` when the moment matrix is not positive definite.
pub fn design_objective(features: &[DVector<f64>], weights: &[f64], a: &DMatrix<f64>) -> f64 {
    let m = moment_matrix(features, weights);
    match generalized_eig(&m, a) {
        Some((vals, _)) => vals[0].max(0.0),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct FrankWolfeResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Objective after each iteration, starting with the uniform design.
    pub trace: Vec<f64>,
}

/// `μ log Σ_j exp(λ_j / μ)` over the generalized eigenvalues of `(M(q), A)`:
/// a convex upper bound on the design objective within `μ log k` of it.
fn smoothed_objective(features: &[DVector<f64>], weights: &[f64], a: &DMatrix<f64>, mu: f64) -> f64 {
    let m = moment_matrix(features, weights);
    match generalized_eig(&m, a) {
        Some((vals, _)) => {
            let top = vals[0];
            top + mu * vals.iter().map(|&l| ((l - top) / mu).exp()).sum::<f64>().ln()
        }
        None => f64::INFINITY,
    }
}

/// Stages of the smoothing schedule; the temperature shrinks by
/// `SMOOTHING_DECAY` per stage, starting at a tenth of the current value.
const SMOOTHING_STAGES: usize = 8;
const SMOOTHING_DECAY: f64 = 0.3;
/// Weights at or below this are treated as off the support.
const SUPPORT_TOL: f64 = 1e-12;

/// Minimize `λ_max((Σ q f fᵀ)⁻¹ A)` over the simplex on `features`.
///
/// Away-step Frank-Wolfe on a log-sum-exp smoothing of the eigenvalues, with
/// exact line search on the smoothed objective. The temperature is lowered in
/// stages. The returned weights are the best iterate under the exact
/// objective, and the trace records that best value, so it never increases.
pub fn frank_wolfe_design(features: &[DVector<f64>], a: &DMatrix<f64>, iters: usize) -> Result<FrankWolfeResult> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no candidate tasks".into()));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    let k = features[0].len();
    if a.nrows() != k || a.ncols() != k {
        return Err(Error::Mismatch {
            expected: k,
            got: a.nrows(),
            context: "design target matrix",
        });
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let n = features.len();
    let mut q = vec![1.0 / n as f64; n];
    let m0 = moment_matrix(features, &q);
    if Cholesky::new(m0.clone()).is_none() {
        return Err(Error::Singular {
            context: "initial design moment matrix",
            rank: linalg::numerical_rank(&m0, 1e-12),
            required: k,
        });
    }
    let mut best_value = design_objective(features, &q, a);
    let mut best_q = q.clone();
    let mut trace = vec![best_value];
    let per_stage = iters.div_ceil(SMOOTHING_STAGES);
    let mut mu = 0.1 * best_value.abs().max(f64::MIN_POSITIVE);
    for t in 0..iters {
        if t > 0 && t % per_stage == 0 {
            mu = SMOOTHING_DECAY * mu.min(0.1 * best_value.abs().max(f64::MIN_POSITIVE));
        }
        let m = moment_matrix(features, &q);
        let Some((vals, vecs)) = generalized_eig(&m, a) else { break };
        let top = vals[0];
        let soft: Vec<f64> = vals.iter().map(|&l| ((l - top) / mu).exp()).collect();
        let z: f64 = soft.iter().sum();
        let grad: Vec<f64> = features
            .iter()
            .map(|f| {
                let mut g = 0.0;
                for j in 0..vals.len() {
                    let p = soft[j] / z;
                    if p < 1e-12 {
                        continue;
                    }
                    let proj = f.dot(&vecs.column(j));
                    g -= p * vals[j].max(0.0) * proj * proj;
                }
                g
            })
            .collect();
        let gq: f64 = grad.iter().zip(&q).map(|(g, q)| g * q).sum();
        let s = argmin(&grad);
        let away = (0..n)
            .filter(|&i| q[i] > SUPPORT_TOL)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]))
            .unwrap_or(s);
        let fw_gap = gq - grad[s];
        let away_gap = grad[away] - gq;
        if fw_gap.max(away_gap) <= 1e-14 * best_value.abs() {
            trace.push(best_value);
            continue;
        }
        let toward = fw_gap >= away_gap || q[away] >= 1.0;
        let (dir, gmax) = if toward {
            let mut d: Vec<f64> = q.iter().map(|x| -x).collect();
            d[s] += 1.0;
            // A full step lands on a vertex, where the moment matrix is singular.
            (d, 1.0 - 1e-9)
        } else {
            let mut d = q.clone();
            d[away] -= 1.0;
            (d, q[away] / (1.0 - q[away]))
        };
        let current = smoothed_objective(features, &q, a, mu);
        let eval = |g: f64| -> f64 {
            let cand: Vec<f64> = q.iter().zip(&dir).map(|(x, d)| (x + g * d).max(0.0)).collect();
            smoothed_objective(features, &cand, a, mu)
        };
        let (step, smoothed) = line_search(eval, gmax, current);
        if smoothed < current {
            for (x, d) in q.iter_mut().zip(&dir) {
                *x = (*x + step * d).max(0.0);
            }
            if !toward && step >= gmax * (1.0 - 1e-9) {
                q[away] = 0.0;
            }
            q.iter_mut().filter(|x| **x <= SUPPORT_TOL).for_each(|x| *x = 0.0);
            let total: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= total);
            let value = design_objective(features, &q, a);
            if value < best_value {
                best_value = value;
                best_q.clone_from(&q);
            }
        }
        trace.push(best_value);
    }
    Ok(FrankWolfeResult {
        weights: best_q,
        objective: best_value,
        trace,
    })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap_or(0)
}

/// Golden-section search of `f` on `[0, hi]`, also checking the endpoint.
/// Returns the best step found and its value; step 0 keeps `f0`.
fn line_search<F: Fn(f64) -> f64>(f: F, hi: f64, f0: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut up) = (0.0, hi);
    let mut x1 = up - INV_PHI * (up - lo);
    let mut x2 = lo + INV_PHI * (up - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            up = x2;
            x2 = x1;
            f2 = f1;
            x1 = up - INV_PHI * (up - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (up - lo);
            f2 = f(x2);
        }
        if up - lo < 1e-12 * hi.max(1e-300) {
            break;
        }
    }
    let mut best = (0.0, f0);
    for (x, fx) in [(x1, f1), (x2, f2), (hi, f(hi))] {
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub w: DVector<f64>,
    pub objective: f64,
    /// Best objective after each round.
    pub trace: Vec<f64>,
}

/// Random search for `argmin_w ‖B̂ ψ_W(w) − target‖` over `space`.
///
/// Each round draws `pool` points uniformly from a ball around the incumbent
/// (the first round around the origin with radius 1), keeps the best point so
/// far, and halves the radius.
pub fn adaptive_source_search<R: Rng + ?Sized>(
    psi_w: &FeatureOperator,
    b_hat: &DMatrix<f64>,
    target: &DVector<f64>,
    space: &TaskSpace,
    rounds: usize,
    pool: usize,
    rng: &mut R,
) -> Result<SearchResult> {
    if rounds == 0 || pool == 0 {
        return Err(Error::InvalidArgument("search needs at least one round and one point".into()));
    }
    if b_hat.ncols() != psi_w.output_dim() || b_hat.nrows() != target.len() {
        return Err(Error::Mismatch {
            expected: b_hat.ncols(),
            got: psi_w.output_dim(),
            context: "search map",
        });
    }
    if space.ambient_dim != psi_w.input_dim() {
        return Err(Error::Mismatch {
            expected: psi_w.input_dim(),
            got: space.ambient_dim,
            context: "search space",
        });
    }
    let objective = |w: &DVector<f64>| -> Result<f64> { Ok((b_hat * psi_w.apply(w)? - target).norm()) };
    let mut center = DVector::zeros(space.ambient_dim);
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut radius = 1.0;
    let mut trace = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        for _ in 0..pool {
            let w = space.sample_near(&center, radius, rng);
            let v = objective(&w)?;
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((w, v));
            }
        }
        let (w, v) = best.as_ref().expect("pool is non-empty");
        center = w.clone();
        trace.push(*v);
        radius *= 0.5;
    }
    let (w, objective) = best.expect("pool is non-empty");
    Ok(SearchResult { w, objective, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_drops_small_eigenvalues() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-9]));
        let c = clip_target_covariance(&s, 1e-3).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.values[0] - 1.0).abs() < 1e-12);
        assert!((c.vectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(clip_target_covariance(&s, 0.0), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn identity_map_preimage() {
        let clipped = ClippedEig {
            vectors: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            values: DVector::from_vec(vec![0.25]),
            gamma: 0.0,
        };
        let sol = solve_ball_closed_form(&DMatrix::identity(2, 2), &clipped).unwrap();
        assert!((sol.w_prime[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(sol.w_prime[(1, 0)], 0.0);
    }

    #[test]
    fn rank_deficient_map_is_refused() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let clipped = clip_target_covariance(&DMatrix::identity(2, 2), 0.5).unwrap();
        assert!(matches!(solve_ball_closed_form(&b, &clipped), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn budget_arithmetic() {
        let sol = BallSolution {
            w_prime: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            tasks: vec![],
        };
        assert_eq!(budget_target_aware(&sol, 0.25, 8.0).unwrap(), 128);
        assert_eq!(budget_target_aware(&sol, 0.125, 8.0).unwrap(), 512);
        let empty = BallSolution {
            w_prime: DMatrix::zeros(2, 0),
            tasks: vec![],
        };
        assert_eq!(budget_target_aware(&empty, 0.25, 8.0).unwrap(), 0);
    }

    #[test]
    fn plan_splits() {
        let tasks: Vec<DVector<f64>> = (0..3).map(|_| DVector::zeros(2)).collect();
        let exact = SamplingPlan::uniform_exact(0, 0, tasks.clone(), 10);
        assert_eq!(exact.per_task_budget, vec![4, 3, 3]);
        let ceil = SamplingPlan::uniform_ceil(0, 0, tasks, 10);
        assert_eq!(ceil.per_task_budget, vec![4, 4, 4]);
    }

    #[test]
    fn single_direction_target_concentrates() {
        let f: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![0.6, 0.6]),
        ];
        let a = &f[0] * f[0].transpose();
        let res = frank_wolfe_design(&f, &a, 300).unwrap();
        assert!(res.weights[0] >= 0.99, "{:?}", res.weights);
    }

    #[test]
    fn orthonormal_basis_gives_uniform_design() {
        let f: Vec<DVector<f64>> = (0..3)
            .map(|i| {
                let mut v = DVector::zeros(3);
                v[i] = 1.0;
                v
            })
            .collect();
        let res = frank_wolfe_design(&f, &DMatrix::identity(3, 3), 50).unwrap();
        for q in &res.weights {
            assert!((q - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!((res.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn singular_start_reports_rank() {
        let f = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])];
        match frank_wolfe_design(&f, &DMatrix::identity(2, 2), 5) {
            Err(Error::Singular { rank, required, .. }) => assert_eq!((rank, required), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_search_returns_its_only_draw() {
        let space = TaskSpace::ball(3, 0..3);
        let psi = FeatureOperator::Identity { dim: 3 };
        let b = DMatrix::identity(3, 3);
        let target = DVector::from_vec(vec![0.2, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = adaptive_source_search(&psi, &b, &target, &space, 1, 1, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expected = space.sample_near(&DVector::zeros(3), 1.0, &mut rng);
        assert_eq!(res.w, expected);
    }
}
