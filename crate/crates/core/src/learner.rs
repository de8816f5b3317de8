//! Sampling strategies: passive, target-agnostic, and target-aware.
//!
//! Every strategy runs in epochs with accuracy `ε_j = 2^{-j}` and records a
//! checkpoint (model estimate plus the data behind it) at the end of each
//! epoch. Epoch 0 is the one-hot warmup for the active strategies.
//!
//! Stage numbers follow the sampling distributions: 1 = coarse warmup (`q0`),
//! 2 = exploration over the estimated source row space (`q1`), 3 =
//! target-aware exploitation. Passive sampling is recorded as stage 0.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{
    self, adaptive_source_search, ceil_budget, clip_target_covariance, frank_wolfe_design,
    solve_ball_closed_form, ClippedEig, SamplingPlan,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::linalg;
use crate::model::{source_feature_count, TargetSpec, TaskSampler, TaskSpace};
use crate::oracles::{
    self, alt_min_representation, assemble_bw, assemble_bw_pinv, fit_heads, fit_task_head, joint_erm, DataPool,
    ModelEstimate, TrainConfig,
};
use crate::seed::{SeedStream, Stream};

pub const STAGE_PASSIVE: usize = 0;
pub const STAGE_COARSE: usize = 1;
pub const STAGE_FINE: usize = 2;
pub const STAGE_TARGET: usize = 3;

// Seed labels under `Sampling -> epoch` that are not sampling stages.
const SEED_DOT_TARGET: u64 = 4;
const SEED_TOP_UP: u64 = 5;
const SEED_CANDIDATES: u64 = 6;
const SEED_SEARCH: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Passive,
    TargetAgnostic,
    TargetAware,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Passive => "passive",
            Strategy::TargetAgnostic => "target-agnostic",
            Strategy::TargetAware => "target-aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "passive" => Ok(Strategy::Passive),
            "target-agnostic" => Ok(Strategy::TargetAgnostic),
            "target-aware" => Ok(Strategy::TargetAware),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum N2Policy {
    /// `ceil(m · β₃ · max‖w′‖² · ε⁻²)`.
    Formula,
    /// A fixed stage-3 total per epoch.
    Fixed { n: usize },
}

/// Per-stage budgets.
///
/// `n0 = ceil(β₁ · n0_scale)` and `n1(j) = ceil(β₂ · n1_scale · ε_j^{-4/3})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudgets {
    pub n0_scale: f64,
    pub n1_scale: f64,
    #[serde(default = "default_n2")]
    pub n2_policy: N2Policy,
    #[serde(default = "one")]
    pub beta1: f64,
    #[serde(default = "one")]
    pub beta2: f64,
    #[serde(default = "eight")]
    pub beta3: f64,
    pub epochs: usize,
    #[serde(default)]
    pub budget_cap: Option<usize>,
}

fn default_n2() -> N2Policy {
    N2Policy::Formula
}
fn one() -> f64 {
    1.0
}
fn eight() -> f64 {
    8.0
}

impl StageBudgets {
    pub fn explicit(n0: usize, n1_scale: f64, epochs: usize) -> Self {
        Self {
            n0_scale: n0 as f64,
            n1_scale,
            n2_policy: N2Policy::Formula,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 8.0,
            epochs,
            budget_cap: None,
        }
    }

    pub fn with_n0_scale(mut self, n0: f64) -> Self {
        self.n0_scale = n0;
        self
    }

    /// Scales from the worst-case analysis with plug-ins `κ̄` and `σ̲` for the
    /// condition number and smallest singular value of the source map.
    pub fn theory(
        d_x: usize,
        d_w: usize,
        k: usize,
        kappa_bar: f64,
        sigma_low: f64,
        delta: f64,
        epochs: usize,
    ) -> Self {
        let (dx, dw, k) = (d_x as f64, d_w as f64, k as f64);
        let kb2 = kappa_bar * kappa_bar;
        let n0 = kb2 * (k.powi(3) * dx * kb2 + dw.powf(1.5) / (sigma_low * sigma_low) * (k + (1.0 / delta).ln()).sqrt());
        let n1 = k.powf(5.0 / 3.0)
            * dw.powf(2.0 / 3.0)
            * dx.powf(1.0 / 3.0)
            * (k.powf(2.0 / 3.0) * dw.powf(1.0 / 3.0) * sigma_low.powf(-4.0 / 3.0) + kb2 * sigma_low.powf(-2.0 / 3.0));
        Self {
            n0_scale: n0,
            n1_scale: n1,
            ..Self::explicit(0, 0.0, epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n0_scale", self.n0_scale),
            ("n1_scale", self.n1_scale),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("budgets.{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("budgets.epochs must be positive".into()));
        }
        if let N2Policy::Fixed { n: 0 } = self.n2_policy {
            return Err(Error::Config("a fixed stage-3 budget must be positive".into()));
        }
        Ok(())
    }

    pub fn eps(j: usize) -> f64 {
        0.5f64.powi(j as i32)
    }

    pub fn n0(&self) -> usize {
        ceil_budget(self.beta1 * self.n0_scale)
    }

    pub fn n1(&self, j: usize) -> usize {
        ceil_budget(self.beta2 * self.n1_scale * Self::eps(j).powf(-4.0 / 3.0))
    }
}

/// Eigenvalue cutoff for the estimated target covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum ClipRule {
    /// `scale · 8 (k d_W)^{3/2} √(d_X / n₁)` with the epoch's planned `n₁`.
    Formula { scale: f64 },
    Fixed { gamma: f64 },
    /// A fraction of the largest eigenvalue.
    Relative { fraction: f64 },
}

impl ClipRule {
    pub fn gamma(&self, k: usize, d_w: usize, d_x: usize, n1: usize, lambda_max: f64) -> f64 {
        match *self {
            ClipRule::Formula { scale } => {
                scale * 8.0 * ((k * d_w) as f64).powf(1.5) * (d_x as f64 / n1.max(1) as f64).sqrt()
            }
            ClipRule::Fixed { gamma } => gamma,
            ClipRule::Relative { fraction } => fraction * lambda_max.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    AltMin,
    JointErm,
}

/// Source tasks for the passive baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PassiveTasks {
    /// Every source axis.
    OneHot,
    /// A fixed set of uniform draws from the source ball.
    RandomBall { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub clip: ClipRule,
    pub save_task_threshold: f64,
    pub reuse_dot_target: bool,
    pub stage3_oracle: Oracle,
    pub passive_tasks: PassiveTasks,
    pub search_rounds: usize,
    pub search_pool: usize,
    pub fw_iters: usize,
    pub fw_candidates: usize,
    /// Keep the warmup data in the representation refits after warmup.
    pub train_on_warmup: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            clip: ClipRule::Formula { scale: 1.0 },
            save_task_threshold: 0.8,
            reuse_dot_target: false,
            stage3_oracle: Oracle::JointErm,
            passive_tasks: PassiveTasks::OneHot,
            search_rounds: 5,
            search_pool: 64,
            fw_iters: 200,
            fw_candidates: 64,
            train_on_warmup: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.save_task_threshold) {
            return Err(Error::Config("learner.save_task_threshold must lie in [0, 1]".into()));
        }
        if self.search_rounds == 0 || self.search_pool == 0 || self.fw_iters == 0 {
            return Err(Error::Config("learner search and design iteration counts must be positive".into()));
        }
        if let PassiveTasks::RandomBall { count: 0 } = self.passive_tasks {
            return Err(Error::Config("learner.passive_tasks.count must be positive".into()));
        }
        match self.clip {
            ClipRule::Formula { scale } if !(scale >= 0.0) => Err(Error::Config("clip scale must be >= 0".into())),
            ClipRule::Fixed { gamma } if !(gamma >= 0.0) => Err(Error::Config("clip gamma must be >= 0".into())),
            ClipRule::Relative { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(Error::Config("clip fraction must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub epoch: usize,
    pub eps: f64,
    pub plan: SamplingPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub eps: f64,
    pub cumulative_budget: usize,
    pub estimate: ModelEstimate,
    /// Task vectors and sample counts behind the estimate.
    pub training_tasks: Vec<(DVector<f64>, usize)>,
    /// Retained target eigen-directions this epoch (target-aware only).
    pub clipped: usize,
    pub stage3_skipped: bool,
    /// `(‖W′W′ᵀ‖_*, tr(Σ̂) / σ_min²(B̂_W^source))` when stage 3 ran on the ball.
    pub exploitation_norms: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTrace {
    pub strategy: Strategy,
    pub stages: Vec<StageRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl ExperimentTrace {
    fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            stages: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn spent(&self) -> usize {
        self.stages.iter().map(|s| s.plan.spent()).sum()
    }

    /// Cumulative samples per distinct task vector through `epoch`.
    pub fn task_budgets(&self, epoch: usize, include_warmup: bool) -> Vec<(DVector<f64>, usize)> {
        let mut out: Vec<(DVector<f64>, usize)> = Vec::new();
        for rec in self.stages.iter().filter(|r| r.epoch <= epoch) {
            if !include_warmup && rec.plan.stage == STAGE_COARSE {
                continue;
            }
            for (w, &n) in rec.plan.tasks.iter().zip(&rec.plan.per_task_budget) {
                if n == 0 {
                    continue;
                }
                match out.iter_mut().find(|(v, _)| v == w) {
                    Some((_, c)) => *c += n,
                    None => out.push((w.clone(), n)),
                }
            }
        }
        out
    }

    pub fn distinct_tasks(&self, epoch: usize, include_warmup: bool) -> usize {
        self.task_budgets(epoch, include_warmup).len()
    }

    /// Tasks outside the warmup whose cumulative budget reaches `eps^{-alpha}`.
    pub fn long_term_tasks(&self, epoch: usize, alpha: f64, eps: f64) -> usize {
        let budgets: Vec<usize> = self.task_budgets(epoch, false).into_iter().map(|(_, n)| n).collect();
        eval::long_term_task_count(&budgets, alpha, eps)
    }
}

/// `true` when the new exploration basis has rotated enough to be worth
/// switching to: `dis(prev, new) ≤ threshold`.
pub fn save_task_gate(prev: &DMatrix<f64>, new: &DMatrix<f64>, threshold: f64) -> Result<bool> {
    for m in [prev, new] {
        let defect = linalg::orthonormality_defect(m);
        if defect > 1e-8 {
            return Err(Error::NotOrthonormal(defect));
        }
    }
    Ok(eval::dis_similarity(prev, new)? <= threshold)
}

/// Top right singular vectors of the estimated source map.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBasis {
    /// `cols × r`, orthonormal.
    pub vectors: DMatrix<f64>,
    /// `true` when fewer than `k` directions were numerically present.
    pub degraded: bool,
}

pub fn compute_q1(b_w_source_hat: &DMatrix<f64>) -> Result<RowBasis> {
    let k = b_w_source_hat.nrows();
    if b_w_source_hat.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument("source map estimate is zero".into()));
    }
    let svd = linalg::svd_sorted(b_w_source_hat);
    let smax = svd.s[0];
    let rank = svd.s.iter().filter(|&&s| s > design::RANK_TOL * smax).count().min(k);
    if rank < k {
        warn!("source map estimate has rank {rank} < {k}; exploring the available directions only");
    }
    Ok(RowBasis {
        vectors: svd.v.columns(0, rank).into_owned(),
        degraded: rank < k,
    })
}

/// State carried between epochs by the active strategies.
#[derive(Debug, Clone)]
struct ActiveState {
    b_x: DMatrix<f64>,
    b_w_source: DMatrix<f64>,
    b_w_target: DMatrix<f64>,
    /// Row-space basis the current exploration set was built from.
    basis: DMatrix<f64>,
    q1_tasks: Vec<DVector<f64>>,
    q1_weights: Vec<f64>,
    warmup_pool: DataPool,
    dot_cache: Option<Vec<crate::model::TaskSample>>,
}

pub struct Learner<'a> {
    pub sampler: &'a dyn TaskSampler,
    pub target: &'a TargetSpec,
    pub budgets: &'a StageBudgets,
    pub train: &'a TrainConfig,
    pub cfg: &'a LearnerConfig,
    pub seeds: SeedStream,
}

impl<'a> Learner<'a> {
    fn k(&self) -> usize {
        self.sampler.dims().k
    }

    fn linear_tasks(&self) -> bool {
        self.sampler.psi_w().is_identity()
    }

    fn space(&self) -> TaskSpace {
        self.sampler.source_space()
    }

    fn source_cols(&self) -> usize {
        source_feature_count(self.sampler.psi_w(), self.sampler.dims().d_w_source)
    }

    /// Source block of `ψ_W(w)`.
    fn source_features(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.sampler.psi_w().apply(w)?;
        Ok(f.rows(0, self.source_cols()).into_owned())
    }

    /// Source-block coordinates of a task vector in the linear case.
    fn source_coords(&self, w: &DVector<f64>) -> DVector<f64> {
        let space = self.space();
        DVector::from_iterator(space.dim(), space.axes.clone().map(|i| w[i]))
    }

    fn embed(&self, v: &DVector<f64>) -> DVector<f64> {
        let space = self.space();
        let mut w = DVector::zeros(space.ambient_dim);
        for (i, ax) in space.axes.clone().enumerate() {
            w[ax] = v[i];
        }
        w
    }

    fn sample_plan(&self, plan: &SamplingPlan, seed_stage: u64, pool: &mut DataPool) -> Result<()> {
        let base = self.seeds.stream(Stream::Sampling).child(plan.epoch as u64).child(seed_stage);
        for (i, (w, &n)) in plan.tasks.iter().zip(&plan.per_task_budget).enumerate() {
            if n == 0 {
                continue;
            }
            let mut rng = base.child(i as u64).rng();
            let sample = self.sampler.sample(w, n, &mut rng)?;
            pool.add(self.sampler.psi_x(), &sample)?;
        }
        Ok(())
    }

    fn training_rng(&self, epoch: usize, stage: usize) -> rand_chacha::ChaCha8Rng {
        self.seeds
            .stream(Stream::Training)
            .child(epoch as u64)
            .child(stage as u64)
            .rng()
    }

    fn pool_tasks(pool: &DataPool) -> Vec<(DVector<f64>, usize)> {
        pool.tasks().iter().map(|t| (t.w.clone(), t.n)).collect()
    }

    /// Least-squares source map from every task in `pool`: heads against `b_x`
    /// regressed on the lifted source features, weighted by sample count.
    fn fit_source_map(&self, pool: &DataPool, b_x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let heads = fit_heads(pool, b_x, self.train.ridge)?;
        let cols = self.source_cols();
        let mut cross = DMatrix::zeros(self.k(), cols);
        let mut moment = DMatrix::zeros(cols, cols);
        for (t, a) in pool.tasks().iter().zip(&heads) {
            let f = self.source_features(&t.w)?;
            let n = t.n as f64;
            cross.ger(n, a, &f, 1.0);
            moment.ger(n, &f, &f, 1.0);
        }
        Ok(cross * linalg::pinv(&moment, 1e-12))
    }

    /// Random ball points plus the source axes, for the finite-candidate designs.
    fn candidates(&self, epoch: usize) -> Vec<DVector<f64>> {
        let space = self.space();
        let mut rng = self
            .seeds
            .stream(Stream::Sampling)
            .child(epoch as u64)
            .child(SEED_CANDIDATES)
            .rng();
        let mut out: Vec<DVector<f64>> = (0..space.dim()).map(|i| space.axis(i)).collect();
        out.extend((0..self.cfg.fw_candidates).map(|_| space.sample_uniform(&mut rng)));
        out
    }

    /// Frank-Wolfe design over `candidates` with features `f`, pruned to the
    /// support that carries weight.
    fn finite_design(
        &self,
        candidates: &[DVector<f64>],
        features: Vec<DVector<f64>>,
    ) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        let k = features[0].len();
        let res = frank_wolfe_design(&features, &DMatrix::identity(k, k), self.cfg.fw_iters)?;
        let wmax = res.weights.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..candidates.len()).filter(|&i| res.weights[i] >= 1e-3 * wmax).collect();
        let total: f64 = keep.iter().map(|&i| res.weights[i]).sum();
        Ok((
            keep.iter().map(|&i| candidates[i].clone()).collect(),
            keep.iter().map(|&i| res.weights[i] / total).collect(),
        ))
    }

    /// Coarse exploration: one-hot probes on the ball, an E-optimal design over
    /// candidates for nonlinear task lifts.
    pub fn run_warmup(&self, trace: &mut ExperimentTrace) -> Result<(ModelEstimate, DataPool)> {
        let n0 = self.budgets.n0();
        let space = self.space();
        let plan = if self.linear_tasks() {
            let tasks = (0..space.dim()).map(|i| space.axis(i)).collect();
            SamplingPlan::uniform_ceil(0, STAGE_COARSE, tasks, n0)
        } else {
            let cands = self.candidates(0);
            let feats = cands.iter().map(|w| self.source_features(w)).collect::<Result<Vec<_>>>()?;
            let (tasks, weights) = self.finite_design(&cands, feats)?;
            let (tasks, weights) = drop_small_allocations(tasks, weights, n0, self.k());
            SamplingPlan::weighted_ceil(0, STAGE_COARSE, tasks, weights, n0)
        };
        let mut pool = DataPool::new(self.sampler.dims().d_psi_x);
        self.sample_plan(&plan, STAGE_COARSE as u64, &mut pool)?;
        trace.stages.push(StageRecord {
            epoch: 0,
            eps: 1.0,
            plan,
        });
        let fit = alt_min_representation(&pool, self.k(), self.train, None, &mut self.training_rng(0, STAGE_COARSE))?;
        let b_w_source = if self.linear_tasks() {
            let vs: Vec<DVector<f64>> = pool.tasks().iter().map(|t| self.source_coords(&t.w)).collect();
            assemble_bw(&fit.heads, &vs)?
        } else {
            self.fit_source_map(&pool, &fit.b_x_hat)?
        };
        let estimate = ModelEstimate {
            b_x_hat: fit.b_x_hat,
            b_w_source_hat: b_w_source,
            b_w_target_hat: DMatrix::zeros(self.k(), 0),
        };
        trace.checkpoints.push(Checkpoint {
            epoch: 0,
            eps: 1.0,
            cumulative_budget: trace.spent(),
            estimate: estimate.clone(),
            training_tasks: Self::pool_tasks(&pool),
            clipped: 0,
            stage3_skipped: true,
            exploitation_norms: None,
        });
        Ok((estimate, pool))
    }

    /// Exploration set from the current source-map estimate.
    fn exploration_set(&self, b_w_source: &DMatrix<f64>, epoch: usize) -> Result<(DMatrix<f64>, Vec<DVector<f64>>, Vec<f64>)> {
        let basis = compute_q1(b_w_source)?;
        if self.linear_tasks() {
            let tasks: Vec<DVector<f64>> = basis
                .vectors
                .column_iter()
                .map(|v| self.embed(&v.into_owned()))
                .collect();
            let m = tasks.len();
            Ok((basis.vectors, tasks, vec![1.0 / m as f64; m]))
        } else {
            let cands = self.candidates(epoch);
            let feats = cands
                .iter()
                .map(|w| Ok(b_w_source * self.source_features(w)?))
                .collect::<Result<Vec<_>>>()?;
            let (tasks, weights) = self.finite_design(&cands, feats)?;
            Ok((basis.vectors, tasks, weights))
        }
    }

    fn exploration_plan(&self, state: &ActiveState, epoch: usize, total: usize) -> SamplingPlan {
        if self.linear_tasks() {
            SamplingPlan::uniform_ceil(epoch, STAGE_FINE, state.q1_tasks.clone(), total)
        } else {
            let (tasks, weights) = drop_small_allocations(state.q1_tasks.clone(), state.q1_weights.clone(), total, self.k());
            SamplingPlan::weighted_ceil(epoch, STAGE_FINE, tasks, weights, total)
        }
    }

    fn start_active(&self, trace: &mut ExperimentTrace) -> Result<ActiveState> {
        let (est, warmup_pool) = self.run_warmup(trace)?;
        let (basis, q1_tasks, q1_weights) = self.exploration_set(&est.b_w_source_hat, 0)?;
        Ok(ActiveState {
            b_x: est.b_x_hat,
            b_w_source: est.b_w_source_hat,
            b_w_target: DMatrix::zeros(self.k(), 0),
            basis,
            q1_tasks,
            q1_weights,
            warmup_pool,
            dot_cache: None,
        })
    }

    /// Refit the representation on the exploration data, refresh the source
    /// map, and switch exploration sets when the row space has moved.
    fn refit_exploration(&self, state: &mut ActiveState, pool2: &DataPool, epoch: usize) -> Result<()> {
        let train = self.with_warmup(state, pool2)?;
        let fit = alt_min_representation(&train, self.k(), self.train, Some(&state.b_x), &mut self.training_rng(epoch, STAGE_FINE))?;
        state.b_x = fit.b_x_hat;
        // Over the q1 tasks alone this equals assembling the q1 heads; the
        // warmup tasks let the row space move off the current basis.
        state.b_w_source = self.fit_source_map(&train, &state.b_x)?;
        let new_basis = compute_q1(&state.b_w_source)?;
        let switch = if new_basis.vectors.ncols() != state.basis.ncols() {
            true
        } else {
            save_task_gate(&state.basis, &new_basis.vectors, self.cfg.save_task_threshold)?
        };
        if switch {
            info!("epoch {epoch}: exploration basis rotated past the threshold, recomputing q1");
            let (basis, tasks, weights) = self.exploration_set(&state.b_w_source, epoch)?;
            state.basis = basis;
            state.q1_tasks = tasks;
            state.q1_weights = weights;
        }
        Ok(())
    }

    /// `pool` plus the warmup data when configured to train on it.
    fn with_warmup(&self, state: &ActiveState, pool: &DataPool) -> Result<DataPool> {
        if !self.cfg.train_on_warmup {
            return Ok(pool.clone());
        }
        let mut all = state.warmup_pool.clone();
        all.merge(pool)?;
        Ok(all)
    }

    /// Estimate the target map from the known-environment target data.
    fn refit_target_map(&self, state: &mut ActiveState, epoch: usize) -> Result<()> {
        let samples = match (&state.dot_cache, self.cfg.reuse_dot_target) {
            (Some(cached), true) => cached.clone(),
            _ => {
                let base = self
                    .seeds
                    .stream(Stream::Sampling)
                    .child(epoch as u64)
                    .child(SEED_DOT_TARGET);
                let drawn = self
                    .target
                    .dot_targets
                    .iter()
                    .enumerate()
                    .map(|(i, w)| self.sampler.sample_target(w, self.target.dot_n_target, &mut base.child(i as u64).rng()))
                    .collect::<Result<Vec<_>>>()?;
                state.dot_cache = Some(drawn.clone());
                drawn
            }
        };
        let heads = samples
            .iter()
            .map(|s| fit_task_head(&state.b_x, self.sampler.psi_x(), s, self.train.ridge))
            .collect::<Result<Vec<_>>>()?;
        let feats = self
            .target
            .dot_targets
            .iter()
            .map(|w| self.sampler.psi_w().apply(w))
            .collect::<Result<Vec<_>>>()?;
        let orthonormal = linalg::orthonormality_defect(&linalg::hstack(&feats)) <= 1e-8;
        state.b_w_target = if orthonormal {
            assemble_bw(&heads, &feats)?
        } else {
            assemble_bw_pinv(&heads, &feats)?
        };
        Ok(())
    }

    /// `Σ_ν p (B̂_W^target ψ_W(w₀))(B̂_W^target ψ_W(w₀))ᵀ`.
    fn target_covariance(&self, state: &ActiveState) -> Result<DMatrix<f64>> {
        let k = self.k();
        let mut sigma = DMatrix::zeros(k, k);
        for (w, &p) in self.target.targets.iter().zip(&self.target.weights) {
            let z = &state.b_w_target * self.sampler.psi_w().apply(w)?;
            sigma.ger(p, &z, &z, 1.0);
        }
        Ok(linalg::symmetrize(&sigma))
    }

    /// Target-aware tasks for this epoch, or `None` when stage 3 is skipped.
    fn exploitation_tasks(
        &self,
        state: &ActiveState,
        clipped: &ClippedEig,
        epoch: usize,
    ) -> Result<Option<(Vec<DVector<f64>>, f64, Option<(f64, f64)>)>> {
        if clipped.is_empty() {
            return Ok(None);
        }
        if self.linear_tasks() {
            let sol = match solve_ball_closed_form(&state.b_w_source, clipped) {
                Ok(sol) => sol,
                Err(Error::RankDeficient { sigma_min, tol }) => {
                    warn!("epoch {epoch}: source map rank deficient (sigma_min {sigma_min:.3e} <= {tol:.3e}); skipping stage 3");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let smin = linalg::svd_sorted(&state.b_w_source).s[self.k() - 1];
            let sigma_trace: f64 = clipped.values.iter().sum();
            let nuclear = linalg::nuclear_norm(&(&sol.w_prime * sol.w_prime.transpose()));
            let norms = Some((nuclear, self.target_covariance(state)?.trace().max(sigma_trace) / (smin * smin)));
            let tasks = sol.tasks.iter().map(|v| self.embed(v)).collect();
            Ok(Some((tasks, sol.max_norm_sq(), norms)))
        } else {
            let cols = self.source_cols();
            let mut b_full = DMatrix::zeros(self.k(), self.sampler.psi_w().output_dim());
            b_full.columns_mut(0, cols).copy_from(&state.b_w_source);
            let base = self.seeds.stream(Stream::Sampling).child(epoch as u64).child(SEED_SEARCH);
            let mut tasks = Vec::with_capacity(clipped.len());
            let mut max_sq = 0.0f64;
            for i in 0..clipped.len() {
                let res = adaptive_source_search(
                    self.sampler.psi_w(),
                    &b_full,
                    &clipped.scaled(i),
                    &self.space(),
                    self.cfg.search_rounds,
                    self.cfg.search_pool,
                    &mut base.child(i as u64).rng(),
                )?;
                max_sq = max_sq.max(res.w.norm_squared());
                tasks.push(res.w);
            }
            Ok(Some((tasks, max_sq, None)))
        }
    }

    fn cap_reached(&self, spent: usize) -> bool {
        self.budgets.budget_cap.is_some_and(|cap| spent >= cap)
    }

    /// Warmup, then per epoch: explore, estimate the target covariance, exploit.
    pub fn run_target_aware(&self) -> Result<ExperimentTrace> {
        let mut trace = ExperimentTrace::new(Strategy::TargetAware);
        let mut state = self.start_active(&mut trace)?;
        let p = self.sampler.dims().d_psi_x;
        let mut pool2 = DataPool::new(p);
        let mut pool3 = DataPool::new(p);
        for j in 1..=self.budgets.epochs {
            if self.cap_reached(trace.spent()) {
                break;
            }
            let eps = StageBudgets::eps(j);
            let n1 = self.budgets.n1(j);
            let plan2 = self.exploration_plan(&state, j, n1);
            self.sample_plan(&plan2, STAGE_FINE as u64, &mut pool2)?;
            trace.stages.push(StageRecord { epoch: j, eps, plan: plan2 });
            self.refit_exploration(&mut state, &pool2, j)?;
            self.refit_target_map(&mut state, j)?;

            let sigma = self.target_covariance(&state)?;
            let lambda_max = linalg::sym_eig_desc(&sigma).0[0];
            let dims = self.sampler.dims();
            let gamma = self.cfg.clip.gamma(dims.k, dims.d_w, dims.d_psi_x, n1, lambda_max);
            let clipped = clip_target_covariance(&sigma, gamma)?;
            let exploit = self.exploitation_tasks(&state, &clipped, j)?;
            let (stage3_skipped, norms) = match exploit {
                None => {
                    info!("epoch {j}: no target direction survives clipping at gamma {gamma:.3e}; stage 3 skipped");
                    (true, None)
                }
                Some((tasks, max_sq, norms)) => {
                    let m = tasks.len();
                    let n2 = match self.budgets.n2_policy {
                        N2Policy::Formula => ceil_budget(m as f64 * self.budgets.beta3 * max_sq / (eps * eps)),
                        N2Policy::Fixed { n } => n,
                    };
                    let plan3 = SamplingPlan::uniform_ceil(j, STAGE_TARGET, tasks, n2);
                    self.sample_plan(&plan3, STAGE_TARGET as u64, &mut pool3)?;
                    trace.stages.push(StageRecord { epoch: j, eps, plan: plan3 });
                    (false, norms)
                }
            };

            let mut joint = self.with_warmup(&state, &pool2)?;
            joint.merge(&pool3)?;
            let b_x = match self.cfg.stage3_oracle {
                Oracle::AltMin => {
                    alt_min_representation(&joint, dims.k, self.train, Some(&state.b_x), &mut self.training_rng(j, STAGE_TARGET))?
                        .b_x_hat
                }
                Oracle::JointErm => {
                    joint_erm(&joint, dims.k, self.train, Some(&state.b_x), None, &mut self.training_rng(j, STAGE_TARGET))?
                        .b_x_hat
                }
            };
            trace.checkpoints.push(Checkpoint {
                epoch: j,
                eps,
                cumulative_budget: trace.spent(),
                estimate: ModelEstimate {
                    b_x_hat: b_x,
                    b_w_source_hat: state.b_w_source.clone(),
                    b_w_target_hat: state.b_w_target.clone(),
                },
                training_tasks: Self::pool_tasks(&joint),
                clipped: clipped.len(),
                stage3_skipped,
                exploitation_norms: norms,
            });
        }
        Ok(trace)
    }

    /// Warmup, then exploration only. With a `grid`, epoch `j` tops the
    /// exploration budget up so the cumulative spend reaches `grid[j]`.
    pub fn run_target_agnostic(&self, grid: Option<&[usize]>) -> Result<ExperimentTrace> {
        let mut trace = ExperimentTrace::new(Strategy::TargetAgnostic);
        let mut state = self.start_active(&mut trace)?;
        let mut pool2 = DataPool::new(self.sampler.dims().d_psi_x);
        let epochs = grid.map_or(self.budgets.epochs, |g| g.len().saturating_sub(1));
        for j in 1..=epochs {
            if grid.is_none() && self.cap_reached(trace.spent()) {
                break;
            }
            let eps = StageBudgets::eps(j);
            let n1 = self.budgets.n1(j);
            let goal = grid.map_or(trace.spent() + n1, |g| g[j]);
            let increment = goal.saturating_sub(trace.spent());
            let first = n1.min(increment);
            let plan = self.exploration_plan(&state, j, first);
            self.sample_plan(&plan, STAGE_FINE as u64, &mut pool2)?;
            trace.stages.push(StageRecord { epoch: j, eps, plan });
            let rest = goal.saturating_sub(trace.spent());
            if rest > 0 {
                let plan = self.exploration_plan(&state, j, rest);
                self.sample_plan(&plan, SEED_TOP_UP, &mut pool2)?;
                trace.stages.push(StageRecord { epoch: j, eps, plan });
            }
            self.refit_exploration(&mut state, &pool2, j)?;
            trace.checkpoints.push(Checkpoint {
                epoch: j,
                eps,
                cumulative_budget: trace.spent(),
                estimate: ModelEstimate {
                    b_x_hat: state.b_x.clone(),
                    b_w_source_hat: state.b_w_source.clone(),
                    b_w_target_hat: DMatrix::zeros(self.k(), 0),
                },
                training_tasks: Self::pool_tasks(&self.with_warmup(&state, &pool2)?),
                clipped: 0,
                stage3_skipped: true,
                exploitation_norms: None,
            });
        }
        Ok(trace)
    }

    fn passive_tasks(&self) -> Vec<DVector<f64>> {
        let space = self.space();
        match self.cfg.passive_tasks {
            PassiveTasks::OneHot => (0..space.dim()).map(|i| space.axis(i)).collect(),
            PassiveTasks::RandomBall { count } => {
                let mut rng = self.seeds.stream(Stream::Sampling).child(u64::MAX).rng();
                (0..count).map(|_| space.sample_uniform(&mut rng)).collect()
            }
        }
    }

    /// Uniform sampling over a fixed source set, refit at every grid budget.
    pub fn run_passive(&self, grid: &[usize]) -> Result<ExperimentTrace> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("passive run needs at least one checkpoint budget".into()));
        }
        let mut trace = ExperimentTrace::new(Strategy::Passive);
        let tasks = self.passive_tasks();
        let mut pool = DataPool::new(self.sampler.dims().d_psi_x);
        let k = self.k();
        let mut b_x: Option<DMatrix<f64>> = None;
        for (j, &goal) in grid.iter().enumerate() {
            let eps = StageBudgets::eps(j);
            let increment = goal.saturating_sub(trace.spent());
            let plan = SamplingPlan::uniform_exact(j, STAGE_PASSIVE, tasks.clone(), increment);
            self.sample_plan(&plan, STAGE_PASSIVE as u64, &mut pool)?;
            trace.stages.push(StageRecord { epoch: j, eps, plan });
            let fit = alt_min_representation(&pool, k, self.train, b_x.as_ref(), &mut self.training_rng(j, STAGE_PASSIVE))?;
            b_x = Some(fit.b_x_hat.clone());
            trace.checkpoints.push(Checkpoint {
                epoch: j,
                eps,
                cumulative_budget: trace.spent(),
                estimate: ModelEstimate::new(fit.b_x_hat),
                training_tasks: Self::pool_tasks(&pool),
                clipped: 0,
                stage3_skipped: true,
                exploitation_norms: None,
            });
        }
        Ok(trace)
    }
}

/// Drop the lightest design points until every remaining task would receive
/// at least `min_n` of `total` samples, so every per-task head is determined.
pub fn drop_small_allocations(
    mut tasks: Vec<DVector<f64>>,
    mut weights: Vec<f64>,
    total: usize,
    min_n: usize,
) -> (Vec<DVector<f64>>, Vec<f64>) {
    loop {
        let sum: f64 = weights.iter().sum();
        let (imin, wmin) = weights
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &w)| if w < acc.1 { (i, w) } else { acc });
        if weights.len() <= 1 || wmin / sum * total as f64 >= min_n as f64 {
            let weights = weights.iter().map(|w| w / sum).collect();
            return (tasks, weights);
        }
        tasks.remove(imin);
        weights.remove(imin);
    }
}

/// Cumulative budgets at the end of every epoch of a trace.
pub fn checkpoint_grid(trace: &ExperimentTrace) -> Vec<usize> {
    trace.checkpoints.iter().map(|c| c.cumulative_budget).collect()
}

pub use oracles::ORTHO_TOL;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q1_of_identity_block() {
        let mut b = DMatrix::zeros(2, 4);
        b[(0, 0)] = 2.0;
        b[(1, 1)] = 1.0;
        let q = compute_q1(&b).unwrap();
        assert!(!q.degraded);
        assert!((q.vectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((q.vectors[(1, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn q1_reports_degraded_rank() {
        let mut b = DMatrix::zeros(2, 4);
        b[(0, 0)] = 1.0;
        let q = compute_q1(&b).unwrap();
        assert!(q.degraded);
        assert_eq!(q.vectors.ncols(), 1);
    }

    #[test]
    fn gate_keeps_identical_and_switches_orthogonal() {
        let a = DMatrix::<f64>::identity(4, 2);
        let b = DMatrix::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
        assert!(!save_task_gate(&a, &a, 0.8).unwrap());
        assert!(save_task_gate(&a, &b, 0.8).unwrap());
    }

    #[test]
    fn small_allocations_are_dropped() {
        let tasks: Vec<DVector<f64>> = (0..3).map(|i| DVector::from_element(1, i as f64)).collect();
        let (t, w) = drop_small_allocations(tasks, vec![0.5, 0.45, 0.05], 100, 8);
        assert_eq!(t.len(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x * 100.0 >= 8.0));
    }

    #[test]
    fn n1_scales_with_accuracy() {
        let b = StageBudgets::explicit(100, 1000.0, 3);
        let r = b.n1(2) as f64 / b.n1(1) as f64;
        assert!((r - 2f64.powf(4.0 / 3.0)).abs() < 1e-3);
        assert_eq!(b.n0(), 100);
    }
}
