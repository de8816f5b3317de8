//! Offline training oracles.
//!
//! All fits work on per-task sufficient statistics (`ΦᵀΦ`, `Φᵀy`, `yᵀy` in the
//! lifted input space), so the cost of a refit does not grow with the number
//! of samples already collected.

use std::path::Path;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, orthonormality_defect, sym_eig_desc, thin_qr};
use crate::model::{FeatureOperator, TaskSample};
use crate::persist;

/// Tolerance on `B̂ᵀB̂ = I` after every representation update.
pub const ORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub am_iters: usize,
    pub gd_steps: usize,
    pub gd_lr: f64,
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            am_iters: 25,
            gd_steps: 200,
            gd_lr: 0.9,
            ridge: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.am_iters == 0 || self.gd_steps == 0 {
            return Err(Error::Config("train.am_iters and train.gd_steps must be positive".into()));
        }
        if !(self.gd_lr > 0.0) || !self.gd_lr.is_finite() {
            return Err(Error::Config(format!("train.gd_lr must be positive, got {}", self.gd_lr)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config(format!("train.ridge must be non-negative, got {}", self.ridge)));
        }
        Ok(())
    }
}

/// Learned representation and task maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    /// `d_psi_x × k`, orthonormal columns.
    pub b_x_hat: DMatrix<f64>,
    pub b_w_source_hat: DMatrix<f64>,
    pub b_w_target_hat: DMatrix<f64>,
}

impl ModelEstimate {
    pub fn new(b_x_hat: DMatrix<f64>) -> Self {
        let k = b_x_hat.ncols();
        Self {
            b_x_hat,
            b_w_source_hat: DMatrix::zeros(k, 0),
            b_w_target_hat: DMatrix::zeros(k, 0),
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (txt, bin) = persist::paths(dir, stem);
        persist::write_header(
            &txt,
            &[
                ("format", "activerep-estimate-v1".to_string()),
                ("d_psi_x", self.b_x_hat.nrows().to_string()),
                ("k", self.b_x_hat.ncols().to_string()),
                ("source_cols", self.b_w_source_hat.ncols().to_string()),
                ("target_cols", self.b_w_target_hat.ncols().to_string()),
            ],
        )?;
        persist::write_matrices(&bin, &[&self.b_x_hat, &self.b_w_source_hat, &self.b_w_target_hat])
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (txt, bin) = persist::paths(dir, stem);
        let h = persist::read_header(&txt)?;
        let format: String = persist::header_get(&h, "format")?;
        if format != "activerep-estimate-v1" {
            return Err(Error::Schema(format!("unsupported estimate format `{format}`")));
        }
        let p: usize = persist::header_get(&h, "d_psi_x")?;
        let k: usize = persist::header_get(&h, "k")?;
        let s: usize = persist::header_get(&h, "source_cols")?;
        let t: usize = persist::header_get(&h, "target_cols")?;
        let mut m = persist::read_matrices(&bin, &[(p, k), (k, s), (k, t)])?.into_iter();
        Ok(Self {
            b_x_hat: m.next().expect("three matrices"),
            b_w_source_hat: m.next().expect("three matrices"),
            b_w_target_hat: m.next().expect("three matrices"),
        })
    }
}

/// Sufficient statistics of one task's data in lifted input space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub w: DVector<f64>,
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
}

/// Accumulated training data, grouped by task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    dim: usize,
    tasks: Vec<TaskStats>,
    weighted_second: DMatrix<f64>,
    second: DMatrix<f64>,
    sum_y2: f64,
    total: usize,
}

impl DataPool {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tasks: Vec::new(),
            weighted_second: DMatrix::zeros(dim, dim),
            second: DMatrix::zeros(dim, dim),
            sum_y2: 0.0,
            total: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tasks(&self) -> &[TaskStats] {
        &self.tasks
    }

    pub fn total_samples(&self) -> usize {
        self.total
    }

    pub fn task_index(&self, w: &DVector<f64>) -> Option<usize> {
        self.tasks.iter().position(|t| &t.w == w)
    }

    pub fn add(&mut self, psi_x: &FeatureOperator, sample: &TaskSample) -> Result<()> {
        let phi = psi_x.apply_rows(&sample.inputs)?;
        self.add_lifted(&sample.w, &phi, &sample.labels)
    }

    /// Add rows `phi` (`n × dim`) with labels `y` under task `w`.
    pub fn add_lifted(&mut self, w: &DVector<f64>, phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        if phi.ncols() != self.dim {
            return Err(Error::Mismatch {
                expected: self.dim,
                got: phi.ncols(),
                context: "lifted inputs",
            });
        }
        if phi.nrows() != y.len() {
            return Err(Error::Mismatch {
                expected: phi.nrows(),
                got: y.len(),
                context: "labels",
            });
        }
        if y.is_empty() {
            return Ok(());
        }
        let gram = phi.tr_mul(phi);
        let xty = phi.tr_mul(y);
        let yty = y.norm_squared();
        let mut scaled = phi.clone();
        for (mut row, &yi) in scaled.row_iter_mut().zip(y.iter()) {
            row *= yi;
        }
        self.weighted_second += scaled.tr_mul(&scaled);
        self.second += &gram;
        self.sum_y2 += yty;
        self.total += y.len();
        match self.task_index(w) {
            Some(i) => {
                let t = &mut self.tasks[i];
                t.n += y.len();
                t.gram += gram;
                t.xty += xty;
                t.yty += yty;
            }
            None => self.tasks.push(TaskStats {
                w: w.clone(),
                n: y.len(),
                gram,
                xty,
                yty,
            }),
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DataPool) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Mismatch {
                expected: self.dim,
                got: other.dim,
                context: "data pool merge",
            });
        }
        for t in &other.tasks {
            match self.task_index(&t.w) {
                Some(i) => {
                    let s = &mut self.tasks[i];
                    s.n += t.n;
                    s.gram += &t.gram;
                    s.xty += &t.xty;
                    s.yty += t.yty;
                }
                None => self.tasks.push(t.clone()),
            }
        }
        self.weighted_second += &other.weighted_second;
        self.second += &other.second;
        self.sum_y2 += other.sum_y2;
        self.total += other.total;
        Ok(())
    }

    /// Mean-adjusted label-weighted second moment
    /// `(1/N) Σ y² φφᵀ − mean(y²) · (1/N) Σ φφᵀ`.
    pub fn moment_estimator(&self) -> DMatrix<f64> {
        let n = self.total.max(1) as f64;
        let mean_y2 = self.sum_y2 / n;
        linalg::symmetrize(&(&self.weighted_second / n - &self.second * (mean_y2 / n)))
    }
}

/// Least-squares head for one task against a frozen representation.
pub fn fit_task_head(b_x_hat: &DMatrix<f64>, psi_x: &FeatureOperator, sample: &TaskSample, ridge: f64) -> Result<DVector<f64>> {
    let phi = psi_x.apply_rows(&sample.inputs)?;
    fit_lifted_head(b_x_hat, &phi, &sample.labels, ridge)
}

/// Solve `min_a ‖Φ B̂ a − y‖² + ridge ‖a‖²` by QR of the (augmented) design.
pub fn fit_lifted_head(b_x_hat: &DMatrix<f64>, phi: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if phi.ncols() != b_x_hat.nrows() {
        return Err(Error::Mismatch {
            expected: b_x_hat.nrows(),
            got: phi.ncols(),
            context: "lifted inputs",
        });
    }
    let k = b_x_hat.ncols();
    let z = phi * b_x_hat;
    let n = z.nrows();
    let (design, rhs) = if ridge > 0.0 {
        let mut d = DMatrix::zeros(n + k, k);
        d.rows_mut(0, n).copy_from(&z);
        d.rows_mut(n, k).fill_diagonal(ridge.sqrt());
        let mut r = DVector::zeros(n + k);
        r.rows_mut(0, n).copy_from(y);
        (d, r)
    } else {
        (z, y.clone())
    };
    if design.nrows() < k {
        return Err(Error::Singular {
            context: "task head",
            rank: design.nrows(),
            required: k,
        });
    }
    let (q, r) = thin_qr(&design).map_err(|_| Error::Singular {
        context: "task head",
        rank: linalg::numerical_rank(&design, 1e-12),
        required: k,
    })?;
    let qty = q.tr_mul(&rhs);
    r.solve_upper_triangular(&qty).ok_or(Error::Singular {
        context: "task head",
        rank: linalg::numerical_rank(&design, 1e-12),
        required: k,
    })
}

/// One pooled head on mixed target data.
pub fn finetune_target(b_x_hat: &DMatrix<f64>, psi_x: &FeatureOperator, samples: &[TaskSample], ridge: f64) -> Result<DVector<f64>> {
    let rows: usize = samples.iter().map(TaskSample::len).sum();
    let d_x = psi_x.input_dim();
    let mut inputs = DMatrix::zeros(rows, d_x);
    let mut labels = DVector::zeros(rows);
    let mut at = 0;
    for s in samples {
        inputs.rows_mut(at, s.len()).copy_from(&s.inputs);
        labels.rows_mut(at, s.len()).copy_from(&s.labels);
        at += s.len();
    }
    let phi = psi_x.apply_rows(&inputs)?;
    fit_lifted_head(b_x_hat, &phi, &labels, ridge)
}

/// Head from sufficient statistics: `(B̂ᵀGB̂ + ridge I) a = B̂ᵀc`.
fn head_from_stats(b: &DMatrix<f64>, t: &TaskStats, ridge: f64) -> Result<DVector<f64>> {
    let gb = &t.gram * b;
    let mut lhs = b.tr_mul(&gb);
    for i in 0..lhs.nrows() {
        lhs[(i, i)] += ridge;
    }
    let rhs = b.tr_mul(&t.xty);
    solve_psd_jittered(linalg::symmetrize(&lhs), &rhs, "task head")
}

/// Cholesky solve of a PSD system. Numerically rank-deficient systems (as
/// from smooth random features on low-dimensional inputs) get a diagonal
/// jitter of at most `1e-6` of the mean diagonal before giving up.
fn solve_psd_jittered(mut lhs: DMatrix<f64>, rhs: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    if let Some(ch) = Cholesky::new(lhs.clone()) {
        return Ok(ch.solve(rhs));
    }
    let n = lhs.nrows();
    let scale = (lhs.trace() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut added = 0.0;
    for rel in [1e-12, 1e-10, 1e-8, 1e-6] {
        let jitter = rel * scale;
        for i in 0..n {
            lhs[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(ch) = Cholesky::new(lhs.clone()) {
            log::debug!("{context}: solved with relative jitter {rel:e}");
            return Ok(ch.solve(rhs));
        }
    }
    Err(Error::Singular {
        context,
        rank: linalg::numerical_rank(&lhs, 1e-12),
        required: n,
    })
}

/// `‖Φ B a − y‖²` from sufficient statistics.
fn task_loss(b: &DMatrix<f64>, a: &DVector<f64>, t: &TaskStats) -> f64 {
    let ba = b * a;
    let quad = ba.dot(&(&t.gram * &ba));
    (quad - 2.0 * ba.dot(&t.xty) + t.yty).max(0.0)
}

/// Fit every task's head against `b`.
pub fn fit_heads(pool: &DataPool, b: &DMatrix<f64>, ridge: f64) -> Result<Vec<DVector<f64>>> {
    pool.tasks.iter().map(|t| head_from_stats(b, t, ridge)).collect()
}

/// Summed squared residual over all tasks.
pub fn pool_loss(pool: &DataPool, b: &DMatrix<f64>, heads: &[DVector<f64>]) -> f64 {
    pool.tasks.iter().zip(heads).map(|(t, a)| task_loss(b, a, t)).sum()
}

#[derive(Debug, Clone)]
pub struct AltMinResult {
    pub b_x_hat: DMatrix<f64>,
    /// One head per pool task, in pool order.
    pub heads: Vec<DVector<f64>>,
    /// Summed squared residual after each head step.
    pub objective: Vec<f64>,
}

/// Spectral initialization from the label-weighted second moment; random
/// orthonormal fallback when the top-`k` gap is numerically zero.
pub fn spectral_init<R: Rng + ?Sized>(pool: &DataPool, k: usize, rng: &mut R) -> DMatrix<f64> {
    let m = pool.moment_estimator();
    let (vals, vecs) = sym_eig_desc(&m);
    let p = vals.len();
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if k < p && (vals[k - 1] - vals[k]) / scale < 1e-6 {
        warn!("moment estimator has no spectral gap at k={k}; starting from a random basis");
        return linalg::random_orthonormal(rng, p, k);
    }
    vecs.columns(0, k).into_owned()
}

/// Alternating least squares for the shared representation.
///
/// Each round fits all heads given `B̂`, then solves the stacked least-squares
/// problem for `B̂` given the heads and re-orthonormalizes its columns.
pub fn alt_min_representation<R: Rng + ?Sized>(
    pool: &DataPool,
    k: usize,
    cfg: &TrainConfig,
    init: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<AltMinResult> {
    let p = pool.dim;
    if pool.tasks.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    if k == 0 || k > p {
        return Err(Error::Dimensions(format!("representation dim {k} is not in 1..={p}")));
    }
    let mut b = match init {
        Some(b0) => {
            if b0.shape() != (p, k) {
                return Err(Error::Mismatch {
                    expected: p * k,
                    got: b0.len(),
                    context: "initial representation",
                });
            }
            linalg::orthonormalize(b0)?
        }
        None => spectral_init(pool, k, rng),
    };
    let mut heads = fit_heads(pool, &b, cfg.ridge)?;
    let mut objective = vec![pool_loss(pool, &b, &heads)];
    for _ in 0..cfg.am_iters {
        let b_raw = representation_step(pool, &heads, p, k, cfg.ridge)?;
        b = linalg::orthonormalize(&b_raw)?;
        heads = fit_heads(pool, &b, cfg.ridge)?;
        objective.push(pool_loss(pool, &b, &heads));
    }
    debug_assert!(orthonormality_defect(&b) <= ORTHO_TOL);
    Ok(AltMinResult {
        b_x_hat: b,
        heads,
        objective,
    })
}

/// `argmin_B Σ_t ‖Φ_t B a_t − y_t‖²` through the normal equations
/// `Σ_t (a_t a_tᵀ ⊗ G_t) vec(B) = Σ_t vec(c_t a_tᵀ)`.
fn representation_step(pool: &DataPool, heads: &[DVector<f64>], p: usize, k: usize, ridge: f64) -> Result<DMatrix<f64>> {
    let dim = p * k;
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (t, a) in pool.tasks.iter().zip(heads) {
        for i in 0..k {
            for j in 0..=i {
                let c = a[i] * a[j];
                if c == 0.0 {
                    continue;
                }
                let mut block = lhs.view_mut((i * p, j * p), (p, p));
                for (dst, src) in block.iter_mut().zip(t.gram.iter()) {
                    *dst += c * src;
                }
            }
            let mut seg = rhs.rows_mut(i * p, p);
            seg.axpy(a[i], &t.xty, 1.0);
        }
    }
    for i in 0..k {
        for j in 0..i {
            let upper = lhs.view((i * p, j * p), (p, p)).transpose();
            lhs.view_mut((j * p, i * p), (p, p)).copy_from(&upper);
        }
    }
    for i in 0..dim {
        lhs[(i, i)] += ridge;
    }
    let vec_b = solve_psd_jittered(lhs, &rhs, "representation update")?;
    Ok(DMatrix::from_column_slice(p, k, vec_b.as_slice()))
}

#[derive(Debug, Clone)]
pub struct ErmResult {
    pub b_x_hat: DMatrix<f64>,
    pub heads: Vec<DVector<f64>>,
    /// Mean squared training residual after each step, starting at the init.
    pub loss: Vec<f64>,
}

/// Mean squared residual `(1/N) Σ_t ‖Φ_t B a_t − y_t‖²` and its gradients with
/// respect to `B` and every head.
pub fn erm_loss_and_grad(pool: &DataPool, b: &DMatrix<f64>, heads: &[DVector<f64>]) -> (f64, DMatrix<f64>, Vec<DVector<f64>>) {
    let n = pool.total.max(1) as f64;
    let mut loss = 0.0;
    let mut gb = DMatrix::zeros(b.nrows(), b.ncols());
    let mut ga = Vec::with_capacity(heads.len());
    for (t, a) in pool.tasks.iter().zip(heads) {
        let ba = b * a;
        let r = &t.gram * &ba - &t.xty;
        loss += task_loss(b, a, t);
        gb.ger(2.0 / n, &r, a, 1.0);
        ga.push(b.tr_mul(&r) * (2.0 / n));
    }
    (loss / n, gb, ga)
}

/// Joint empirical risk minimization over the representation and all heads.
///
/// Block gradient descent: a step on `B` then a step on the heads, each scaled
/// by `gd_lr` over the block's Lipschitz constant. The representation is
/// re-orthonormalized at the end (heads absorb the triangular factor).
pub fn joint_erm<R: Rng + ?Sized>(
    pool: &DataPool,
    k: usize,
    cfg: &TrainConfig,
    init_b: Option<&DMatrix<f64>>,
    init_heads: Option<&[DVector<f64>]>,
    rng: &mut R,
) -> Result<ErmResult> {
    if pool.tasks.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let p = pool.dim;
    let mut b = match init_b {
        Some(b0) => b0.clone(),
        None => spectral_init(pool, k, rng),
    };
    if b.shape() != (p, k) {
        return Err(Error::Mismatch {
            expected: p * k,
            got: b.len(),
            context: "initial representation",
        });
    }
    let mut heads = match init_heads {
        Some(h) if h.len() == pool.tasks.len() => h.to_vec(),
        Some(h) => {
            return Err(Error::Mismatch {
                expected: pool.tasks.len(),
                got: h.len(),
                context: "initial heads",
            })
        }
        None => fit_heads(pool, &b, cfg.ridge)?,
    };
    let n = pool.total.max(1) as f64;
    let gram_norms: Vec<f64> = pool
        .tasks
        .iter()
        .map(|t| sym_eig_desc(&t.gram).0[0].max(0.0))
        .collect();
    let (l0, _, _) = erm_loss_and_grad(pool, &b, &heads);
    let mut loss = vec![l0];
    for step in 0..cfg.gd_steps {
        let (_, gb, _) = erm_loss_and_grad(pool, &b, &heads);
        let lip_b: f64 = pool
            .tasks
            .iter()
            .zip(&heads)
            .zip(&gram_norms)
            .map(|((_, a), g)| 2.0 * a.norm_squared() * g / n)
            .sum();
        if lip_b > 0.0 {
            b -= gb * (cfg.gd_lr / lip_b);
        }
        let (_, _, ga) = erm_loss_and_grad(pool, &b, &heads);
        for ((a, g), t) in heads.iter_mut().zip(&ga).zip(&pool.tasks) {
            let btgb = b.tr_mul(&(&t.gram * &b));
            let lip = 2.0 * sym_eig_desc(&btgb).0[0].max(0.0) / n;
            if lip > 0.0 {
                *a -= g * (cfg.gd_lr / lip);
            }
        }
        let (l, _, _) = erm_loss_and_grad(pool, &b, &heads);
        if !l.is_finite() || l > 10.0 * l0.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged(format!(
                "training loss {l:.3e} at step {step} exceeds 10x the initial {l0:.3e} (lr {})",
                cfg.gd_lr
            )));
        }
        loss.push(l);
    }
    let (q, r) = thin_qr(&b)?;
    let heads = heads.iter().map(|a| &r * a).collect();
    Ok(ErmResult { b_x_hat: q, heads, loss })
}

/// `Σ ŵ_i v_iᵀ` for orthonormal `v_i`.
pub fn assemble_bw(heads: &[DVector<f64>], vs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if heads.len() != vs.len() || heads.is_empty() {
        return Err(Error::Mismatch {
            expected: vs.len(),
            got: heads.len(),
            context: "heads and task vectors",
        });
    }
    let v = linalg::hstack(vs);
    let defect = orthonormality_defect(&v);
    if defect > 1e-8 {
        return Err(Error::NotOrthonormal(defect));
    }
    let h = linalg::hstack(heads);
    Ok(h * v.transpose())
}

/// Least-norm `B̂` with `B̂ v_i = ŵ_i` for any linearly independent `v_i`.
pub fn assemble_bw_pinv(heads: &[DVector<f64>], vs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if heads.len() != vs.len() || heads.is_empty() {
        return Err(Error::Mismatch {
            expected: vs.len(),
            got: heads.len(),
            context: "heads and task vectors",
        });
    }
    let v = linalg::hstack(vs);
    let rank = linalg::numerical_rank(&v, 1e-10);
    if rank < vs.len() {
        return Err(Error::Singular {
            context: "task vectors for map assembly",
            rank,
            required: vs.len(),
        });
    }
    Ok(linalg::hstack(heads) * linalg::pinv(&v, 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_labels_give_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = linalg::random_orthonormal(&mut rng, 5, 2);
        let phi = linalg::gaussian_matrix(&mut rng, 20, 5);
        let a = fit_lifted_head(&b, &phi, &DVector::zeros(20), 0.0).unwrap();
        assert!(a.norm() == 0.0);
    }

    #[test]
    fn too_few_rows_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = linalg::random_orthonormal(&mut rng, 5, 3);
        let phi = linalg::gaussian_matrix(&mut rng, 2, 5);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(fit_lifted_head(&b, &phi, &y, 0.0), Err(Error::Singular { .. })));
        assert!(fit_lifted_head(&b, &phi, &y, 0.1).is_ok());
    }

    #[test]
    fn one_hot_assembly_reconstructs() {
        let heads: Vec<DVector<f64>> = (0..3).map(|i| DVector::from_vec(vec![i as f64, 1.0])).collect();
        let vs: Vec<DVector<f64>> = (0..3)
            .map(|i| {
                let mut v = DVector::zeros(3);
                v[i] = 1.0;
                v
            })
            .collect();
        let b = assemble_bw(&heads, &vs).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn assembly_rejects_non_orthonormal() {
        let heads = vec![DVector::from_vec(vec![1.0]); 2];
        let vs = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 1.0])];
        assert!(matches!(assemble_bw(&heads, &vs), Err(Error::NotOrthonormal(_))));
        assert!(assemble_bw_pinv(&heads, &vs).is_ok());
    }

    #[test]
    fn pool_merges_repeated_tasks() {
        let mut pool = DataPool::new(2);
        let w = DVector::from_vec(vec![1.0, 0.0]);
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        pool.add_lifted(&w, &phi, &y).unwrap();
        pool.add_lifted(&w, &phi, &y).unwrap();
        assert_eq!(pool.tasks().len(), 1);
        assert_eq!(pool.tasks()[0].n, 4);
        assert_eq!(pool.total_samples(), 4);
        assert_eq!(pool.tasks()[0].yty, 10.0);
    }
}
