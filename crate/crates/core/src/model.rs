//! Task spaces, feature lifts, and the planted bilinear ground truth.
//!
//! Labels follow `y = ψ_X(x)ᵀ B_X B_W ψ_W(w) + ξ` with `x ~ N(0, I)` and
//! `ξ ~ N(0, σ²)`. Anything that can hand out labeled data for a task vector
//! implements [`TaskSampler`], so the learner runs unchanged on the planted
//! model and on the pendulum simulator.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_matrix, gaussian_vector, random_orthonormal};
use crate::persist;
use crate::seed::{SeedStream, Stream};

/// Slack on the unit-ball constraint.
pub const BALL_TOL: f64 = 1e-9;

/// Allowed band for the column norms of the source block of `B_W`.
pub const COLUMN_NORM_BAND: (f64, f64) = (0.9, 1.1);

pub const PENDULUM_TASK_DIM: usize = 6;
pub const PENDULUM_FEATURE_DIM: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub d_x: usize,
    pub d_psi_x: usize,
    pub d_w: usize,
    pub d_w_source: usize,
    pub d_psi_w: usize,
    pub k: usize,
}

impl Dimensions {
    /// Identity lifts on both sides.
    pub fn linear(d_x: usize, d_w: usize, d_w_source: usize, k: usize) -> Self {
        Self {
            d_x,
            d_psi_x: d_x,
            d_w,
            d_w_source,
            d_psi_w: d_w,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("d_x", self.d_x),
            ("d_psi_x", self.d_psi_x),
            ("d_w", self.d_w),
            ("d_w_source", self.d_w_source),
            ("d_psi_w", self.d_psi_w),
            ("k", self.k),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Dimensions(format!("{name} must be at least 1")));
        }
        if self.k > self.d_psi_w {
            return Err(Error::Dimensions(format!(
                "k ({}) exceeds d_psi_w ({})",
                self.k, self.d_psi_w
            )));
        }
        if self.k > self.d_psi_x {
            return Err(Error::Dimensions(format!(
                "k ({}) exceeds d_psi_x ({})",
                self.k, self.d_psi_x
            )));
        }
        if self.d_w_source > self.d_w {
            return Err(Error::Dimensions(format!(
                "d_w_source ({}) exceeds d_w ({})",
                self.d_w_source, self.d_w
            )));
        }
        if 2 * self.d_w_source < self.d_w {
            return Err(Error::Dimensions(format!(
                "d_w_source ({}) is below half of d_w ({})",
                self.d_w_source, self.d_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSpaceKind {
    UnitBall,
    OneHot,
}

/// A set of task vectors in `ℝ^{d_w}` supported on a contiguous block of axes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpace {
    pub kind: TaskSpaceKind,
    pub ambient_dim: usize,
    pub axes: Range<usize>,
}

impl TaskSpace {
    pub fn ball(ambient_dim: usize, axes: Range<usize>) -> Self {
        Self {
            kind: TaskSpaceKind::UnitBall,
            ambient_dim,
            axes,
        }
    }

    pub fn one_hot(ambient_dim: usize, axes: Range<usize>) -> Self {
        Self {
            kind: TaskSpaceKind::OneHot,
            ambient_dim,
            axes,
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Standard basis vector for the `i`-th axis of the block.
    pub fn axis(&self, i: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.ambient_dim);
        e[self.axes.start + i] = 1.0;
        e
    }

    pub fn contains(&self, w: &DVector<f64>) -> bool {
        if w.len() != self.ambient_dim {
            return false;
        }
        let outside = (0..self.ambient_dim)
            .filter(|i| !self.axes.contains(i))
            .any(|i| w[i] != 0.0);
        if outside {
            return false;
        }
        match self.kind {
            TaskSpaceKind::UnitBall => w.norm() <= 1.0 + BALL_TOL,
            TaskSpaceKind::OneHot => {
                let ones = self.axes.clone().filter(|&i| w[i] == 1.0).count();
                let zeros = self.axes.clone().filter(|&i| w[i] == 0.0).count();
                ones == 1 && ones + zeros == self.dim()
            }
        }
    }

    pub fn check(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.ambient_dim {
            return Err(Error::Mismatch {
                expected: self.ambient_dim,
                got: w.len(),
                context: "task vector",
            });
        }
        if self.contains(w) {
            Ok(())
        } else {
            Err(Error::OutsideTaskSpace { norm: w.norm() })
        }
    }

    /// Uniform draw from the space (a random axis for one-hot spaces).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self.kind {
            TaskSpaceKind::OneHot => self.axis(rng.random_range(0..self.dim())),
            TaskSpaceKind::UnitBall => {
                let center = DVector::zeros(self.ambient_dim);
                self.sample_near(&center, 1.0, rng)
            }
        }
    }

    /// Uniform draw from the ball of `radius` around `center` (restricted to the
    /// block), pulled back onto the unit ball when it lands outside.
    pub fn sample_near<R: Rng + ?Sized>(
        &self,
        center: &DVector<f64>,
        radius: f64,
        rng: &mut R,
    ) -> DVector<f64> {
        let d = self.dim();
        let dir = loop {
            let g = gaussian_vector(rng, d);
            let n = g.norm();
            if n > 0.0 {
                break g / n;
            }
        };
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / d as f64);
        let mut w = center.clone();
        for (i, ax) in self.axes.clone().enumerate() {
            w[ax] += r * dir[i];
        }
        project_to_ball(&w)
    }
}

/// `w / max(1, ‖w‖)`.
pub fn project_to_ball(w: &DVector<f64>) -> DVector<f64> {
    let n = w.norm();
    if n > 1.0 {
        w / n
    } else {
        w.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Identity,
    Fourier,
    PendulumPoly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureOperator {
    Identity { dim: usize },
    /// `v ↦ cos(A v + b)` elementwise.
    Fourier { a: DMatrix<f64>, b: DVector<f64> },
    /// Monomial lift of the 6-dimensional pendulum task vector.
    PendulumPoly,
}

impl FeatureOperator {
    pub fn fourier<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, output_dim: usize, scale: f64) -> Self {
        let a = gaussian_matrix(rng, output_dim, input_dim) * scale;
        let b = gaussian_vector(rng, output_dim);
        FeatureOperator::Fourier { a, b }
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureOperator::Identity { .. } => FeatureKind::Identity,
            FeatureOperator::Fourier { .. } => FeatureKind::Fourier,
            FeatureOperator::PendulumPoly => FeatureKind::PendulumPoly,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, FeatureOperator::Identity { .. })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureOperator::Identity { dim } => *dim,
            FeatureOperator::Fourier { a, .. } => a.ncols(),
            FeatureOperator::PendulumPoly => PENDULUM_TASK_DIM,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureOperator::Identity { dim } => *dim,
            FeatureOperator::Fourier { a, .. } => a.nrows(),
            FeatureOperator::PendulumPoly => PENDULUM_FEATURE_DIM,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::Mismatch {
                expected: self.input_dim(),
                got: v.len(),
                context: "feature operator input",
            });
        }
        Ok(match self {
            FeatureOperator::Identity { .. } => v.clone(),
            FeatureOperator::Fourier { a, b } => (a * v + b).map(f64::cos),
            FeatureOperator::PendulumPoly => pendulum_poly(v),
        })
    }

    /// Lift every row of `x` (`n × input_dim`) into an `n × output_dim` matrix.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Mismatch {
                expected: self.input_dim(),
                got: x.ncols(),
                context: "feature operator input",
            });
        }
        Ok(match self {
            FeatureOperator::Identity { .. } => x.clone(),
            FeatureOperator::Fourier { a, b } => {
                let mut z = x * a.transpose();
                for mut row in z.row_iter_mut() {
                    for (j, e) in row.iter_mut().enumerate() {
                        *e = (*e + b[j]).cos();
                    }
                }
                z
            }
            FeatureOperator::PendulumPoly => {
                let mut z = DMatrix::zeros(x.nrows(), PENDULUM_FEATURE_DIM);
                for i in 0..x.nrows() {
                    let row = pendulum_poly(&x.row(i).transpose());
                    z.set_row(i, &row.transpose());
                }
                z
            }
        })
    }
}

/// Layout: `[c_x, c_y, ĝ, α₁, α₂, c_x c_y, c_x², c_x² c_y, c_x³, c_y², c_y² c_x, c_y³, dummy]`
/// for `w = [c_x, c_y, α₁, α₂, ĝ, dummy]`.
fn pendulum_poly(w: &DVector<f64>) -> DVector<f64> {
    let (cx, cy, a1, a2, g, dummy) = (w[0], w[1], w[2], w[3], w[4], w[5]);
    DVector::from_vec(vec![
        cx,
        cy,
        g,
        a1,
        a2,
        cx * cy,
        cx * cx,
        cx * cx * cy,
        cx * cx * cx,
        cy * cy,
        cy * cy * cx,
        cy * cy * cy,
        dummy,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Conditioning {
    Well,
    Ill { kappa: f64 },
}

/// Lift choices for a planted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lifts {
    pub psi_x: FeatureKind,
    pub psi_w: FeatureKind,
    pub fourier_scale: f64,
}

impl Default for Lifts {
    fn default() -> Self {
        Self {
            psi_x: FeatureKind::Identity,
            psi_w: FeatureKind::Identity,
            fourier_scale: 1.0,
        }
    }
}

/// One task's labeled data. `inputs` is `n × d_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub w: DVector<f64>,
    pub inputs: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Source of labeled task data.
pub trait TaskSampler: Sync {
    fn dims(&self) -> &Dimensions;
    fn psi_x(&self) -> &FeatureOperator;
    fn psi_w(&self) -> &FeatureOperator;
    fn noise_sigma(&self) -> f64;
    /// The ball the learner may query.
    fn source_space(&self) -> TaskSpace;
    fn sample(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample>;
    /// Data for a target-side task vector, which need not lie in the source space.
    fn sample_target(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        self.sample(w, n, rng)
    }
    /// The planted model, when there is one.
    fn truth(&self) -> Option<&GroundTruthModel> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub dims: Dimensions,
    pub conditioning: Conditioning,
    pub b_x: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub psi_x: FeatureOperator,
    pub psi_w: FeatureOperator,
    pub noise_sigma: f64,
    pub seed: u64,
    pub fourier_scale: f64,
}

impl GroundTruthModel {
    pub fn generate(
        dims: Dimensions,
        conditioning: Conditioning,
        lifts: Lifts,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if let Conditioning::Ill { kappa } = conditioning {
            if !(kappa >= 1.0) || !kappa.is_finite() {
                return Err(Error::InvalidArgument(format!("kappa must be >= 1, got {kappa}")));
            }
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        let mut rng = SeedStream::new(seed).stream(Stream::Truth).rng();
        let psi_x = build_lift(lifts.psi_x, dims.d_x, dims.d_psi_x, lifts.fourier_scale, &mut rng)?;
        let psi_w = build_lift(lifts.psi_w, dims.d_w, dims.d_psi_w, lifts.fourier_scale, &mut rng)?;
        let b_x = random_orthonormal(&mut rng, dims.d_psi_x, dims.k);

        let source_cols = source_feature_count(&psi_w, dims.d_w_source);
        let mut b_w = DMatrix::zeros(dims.k, dims.d_psi_w);
        let source = spectral_block(dims.k, source_cols, conditioning, &mut rng);
        b_w.columns_mut(0, source_cols).copy_from(&source);
        let rest = dims.d_psi_w - source_cols;
        if rest > 0 {
            let target = spectral_block(dims.k, rest, conditioning, &mut rng);
            b_w.columns_mut(source_cols, rest).copy_from(&target);
        }
        let gt = Self {
            dims,
            conditioning,
            b_x,
            b_w,
            psi_x,
            psi_w,
            noise_sigma,
            seed,
            fourier_scale: lifts.fourier_scale,
        };
        gt.check_column_band()?;
        Ok(gt)
    }

    /// Columns of `B_W` that source tasks can excite.
    pub fn source_cols(&self) -> usize {
        source_feature_count(&self.psi_w, self.dims.d_w_source)
    }

    pub fn b_w_source(&self) -> DMatrix<f64> {
        self.b_w.columns(0, self.source_cols()).into_owned()
    }

    fn check_column_band(&self) -> Result<()> {
        let (lo, hi) = COLUMN_NORM_BAND;
        for (j, col) in self.b_w_source().column_iter().enumerate() {
            let n = col.norm();
            if n < lo || n > hi {
                return Err(Error::Dimensions(format!(
                    "column {j} of the source map has norm {n:.4}, outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Representation coefficients `B_W ψ_W(w)`.
    pub fn task_coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.b_w * self.psi_w.apply(w)?)
    }

    /// Noiseless regression function in lifted input space: `B_X B_W ψ_W(w)`.
    pub fn regression_vector(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.b_x * self.task_coefficients(w)?)
    }

    pub fn check_task(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dims.d_w {
            return Err(Error::Mismatch {
                expected: self.dims.d_w,
                got: w.len(),
                context: "task vector",
            });
        }
        let n = w.norm();
        if n > 1.0 + BALL_TOL {
            return Err(Error::OutsideTaskSpace { norm: n });
        }
        Ok(())
    }

    /// Like [`TaskSampler::sample`] but without the ball restriction; target
    /// environments may sit outside the source ball.
    pub fn sample_unchecked(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        let beta = self.regression_vector(w)?;
        let inputs = gaussian_matrix(rng, n, self.dims.d_x);
        let lifted = self.psi_x.apply_rows(&inputs)?;
        let mut labels = lifted * beta;
        if self.noise_sigma > 0.0 {
            for y in labels.iter_mut() {
                let xi: f64 = rng.sample(StandardNormal);
                *y += self.noise_sigma * xi;
            }
        }
        Ok(TaskSample {
            w: w.clone(),
            inputs,
            labels,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (txt, bin) = persist::paths(dir, stem);
        let d = &self.dims;
        let (cond, kappa) = match self.conditioning {
            Conditioning::Well => ("well", 1.0),
            Conditioning::Ill { kappa } => ("ill", kappa),
        };
        persist::write_header(
            &txt,
            &[
                ("format", "activerep-truth-v1".to_string()),
                ("d_x", d.d_x.to_string()),
                ("d_psi_x", d.d_psi_x.to_string()),
                ("d_w", d.d_w.to_string()),
                ("d_w_source", d.d_w_source.to_string()),
                ("d_psi_w", d.d_psi_w.to_string()),
                ("k", d.k.to_string()),
                ("seed", self.seed.to_string()),
                ("sigma", format!("{:?}", self.noise_sigma)),
                ("conditioning", cond.to_string()),
                ("kappa", format!("{kappa:?}")),
                ("psi_x", kind_name(self.psi_x.kind()).to_string()),
                ("psi_w", kind_name(self.psi_w.kind()).to_string()),
                ("fourier_scale", format!("{:?}", self.fourier_scale)),
            ],
        )?;
        let mut mats: Vec<DMatrix<f64>> = vec![self.b_x.clone(), self.b_w.clone()];
        for op in [&self.psi_x, &self.psi_w] {
            if let FeatureOperator::Fourier { a, b } = op {
                mats.push(a.clone());
                mats.push(DMatrix::from_column_slice(1, b.len(), b.as_slice()));
            }
        }
        let refs: Vec<&DMatrix<f64>> = mats.iter().collect();
        persist::write_matrices(&bin, &refs)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (txt, bin) = persist::paths(dir, stem);
        let h = persist::read_header(&txt)?;
        let format: String = persist::header_get(&h, "format")?;
        if format != "activerep-truth-v1" {
            return Err(Error::Schema(format!("unsupported ground-truth format `{format}`")));
        }
        let dims = Dimensions {
            d_x: persist::header_get(&h, "d_x")?,
            d_psi_x: persist::header_get(&h, "d_psi_x")?,
            d_w: persist::header_get(&h, "d_w")?,
            d_w_source: persist::header_get(&h, "d_w_source")?,
            d_psi_w: persist::header_get(&h, "d_psi_w")?,
            k: persist::header_get(&h, "k")?,
        };
        dims.validate()?;
        let cond: String = persist::header_get(&h, "conditioning")?;
        let kappa: f64 = persist::header_get(&h, "kappa")?;
        let conditioning = match cond.as_str() {
            "well" => Conditioning::Well,
            "ill" => Conditioning::Ill { kappa },
            other => return Err(Error::Schema(format!("unknown conditioning `{other}`"))),
        };
        let psi_x_kind = parse_kind(&persist::header_get::<String>(&h, "psi_x")?)?;
        let psi_w_kind = parse_kind(&persist::header_get::<String>(&h, "psi_w")?)?;
        let mut shapes = vec![(dims.d_psi_x, dims.k), (dims.k, dims.d_psi_w)];
        if psi_x_kind == FeatureKind::Fourier {
            shapes.push((dims.d_psi_x, dims.d_x));
            shapes.push((1, dims.d_psi_x));
        }
        if psi_w_kind == FeatureKind::Fourier {
            shapes.push((dims.d_psi_w, dims.d_w));
            shapes.push((1, dims.d_psi_w));
        }
        let mut mats = persist::read_matrices(&bin, &shapes)?.into_iter();
        let b_x = mats.next().expect("shape list");
        let b_w = mats.next().expect("shape list");
        let mut load_op = |kind: FeatureKind, d_in: usize| -> FeatureOperator {
            match kind {
                FeatureKind::Identity => FeatureOperator::Identity { dim: d_in },
                FeatureKind::PendulumPoly => FeatureOperator::PendulumPoly,
                FeatureKind::Fourier => {
                    let a = mats.next().expect("shape list");
                    let b = mats.next().expect("shape list");
                    FeatureOperator::Fourier {
                        a,
                        b: DVector::from_column_slice(b.as_slice()),
                    }
                }
            }
        };
        let psi_x = load_op(psi_x_kind, dims.d_x);
        let psi_w = load_op(psi_w_kind, dims.d_w);
        Ok(Self {
            dims,
            conditioning,
            b_x,
            b_w,
            psi_x,
            psi_w,
            noise_sigma: persist::header_get(&h, "sigma")?,
            seed: persist::header_get(&h, "seed")?,
            fourier_scale: persist::header_get(&h, "fourier_scale")?,
        })
    }
}

impl TaskSampler for GroundTruthModel {
    fn dims(&self) -> &Dimensions {
        &self.dims
    }

    fn psi_x(&self) -> &FeatureOperator {
        &self.psi_x
    }

    fn psi_w(&self) -> &FeatureOperator {
        &self.psi_w
    }

    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    fn source_space(&self) -> TaskSpace {
        TaskSpace::ball(self.dims.d_w, 0..self.dims.d_w_source)
    }

    fn sample(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        self.check_task(w)?;
        self.sample_unchecked(w, n, rng)
    }

    fn sample_target(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        self.sample_unchecked(w, n, rng)
    }

    fn truth(&self) -> Option<&GroundTruthModel> {
        Some(self)
    }
}

fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Identity => "identity",
        FeatureKind::Fourier => "fourier",
        FeatureKind::PendulumPoly => "pendulum-poly",
    }
}

fn parse_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "identity" => Ok(FeatureKind::Identity),
        "fourier" => Ok(FeatureKind::Fourier),
        "pendulum-poly" => Ok(FeatureKind::PendulumPoly),
        other => Err(Error::Schema(format!("unknown feature kind `{other}`"))),
    }
}

pub fn build_lift<R: Rng + ?Sized>(
    kind: FeatureKind,
    d_in: usize,
    d_out: usize,
    scale: f64,
    rng: &mut R,
) -> Result<FeatureOperator> {
    match kind {
        FeatureKind::Identity => {
            if d_in != d_out {
                return Err(Error::Dimensions(format!(
                    "identity lift needs equal input and output dims, got {d_in} and {d_out}"
                )));
            }
            Ok(FeatureOperator::Identity { dim: d_in })
        }
        FeatureKind::Fourier => Ok(FeatureOperator::fourier(rng, d_in, d_out, scale)),
        FeatureKind::PendulumPoly => {
            if d_in != PENDULUM_TASK_DIM || d_out != PENDULUM_FEATURE_DIM {
                return Err(Error::Dimensions(format!(
                    "pendulum-poly lift maps {PENDULUM_TASK_DIM} -> {PENDULUM_FEATURE_DIM}, got {d_in} -> {d_out}"
                )));
            }
            Ok(FeatureOperator::PendulumPoly)
        }
    }
}

/// Number of lifted task features reachable from source tasks. For the
/// identity lift these are the first `d_w_source` coordinates; the pendulum
/// lift leaves only the trailing dummy feature to targets.
pub fn source_feature_count(psi_w: &FeatureOperator, d_w_source: usize) -> usize {
    match psi_w {
        FeatureOperator::Identity { .. } => d_w_source,
        FeatureOperator::PendulumPoly => PENDULUM_FEATURE_DIM - 1,
        FeatureOperator::Fourier { a, .. } => a.nrows(),
    }
}

/// Singular values for a `k × cols` block, normalized so that `Σ s² = cols`.
pub fn block_spectrum(rank: usize, cols: usize, conditioning: Conditioning) -> Vec<f64> {
    let raw: Vec<f64> = match conditioning {
        Conditioning::Well => vec![1.0; rank],
        Conditioning::Ill { kappa } => (0..rank)
            .map(|i| {
                if rank == 1 {
                    1.0
                } else {
                    kappa.powf(-(i as f64) / (rank as f64 - 1.0))
                }
            })
            .collect(),
    };
    let total: f64 = raw.iter().map(|s| s * s).sum();
    let c = (cols as f64 / total).sqrt();
    raw.into_iter().map(|s| s * c).collect()
}

/// `U diag(s) Vᵀ` with a prescribed spectrum and unit-norm columns.
fn spectral_block<R: Rng + ?Sized>(k: usize, cols: usize, conditioning: Conditioning, rng: &mut R) -> DMatrix<f64> {
    let rank = k.min(cols);
    let s = block_spectrum(rank, cols, conditioning);
    let u = random_orthonormal(rng, k, rank);
    let v = equal_weight_frame(rng, cols, &s);
    u * DMatrix::from_diagonal(&DVector::from_vec(s)) * v.transpose()
}

/// Orthonormal `cols × s.len()` frame `V` with every row satisfying
/// `Σ_i s_i² V_ji² = Σ s² / cols`, so `U diag(s) Vᵀ` has equal column norms.
///
/// Starts from a random frame and fixes one row at a time with a Givens
/// rotation between a row above and a row below the target weight.
fn equal_weight_frame<R: Rng + ?Sized>(rng: &mut R, cols: usize, s: &[f64]) -> DMatrix<f64> {
    let r = s.len();
    let mut v = random_orthonormal(rng, cols, r);
    let s2: Vec<f64> = s.iter().map(|x| x * x).collect();
    let target = s2.iter().sum::<f64>() / cols as f64;
    let weight = |v: &DMatrix<f64>, a: usize, b: usize| -> f64 { (0..r).map(|i| s2[i] * v[(a, i)] * v[(b, i)]).sum() };
    let mut fixed = vec![false; cols];
    for _ in 0..cols {
        let diag: Vec<f64> = (0..cols).map(|j| weight(&v, j, j)).collect();
        let hi = (0..cols)
            .filter(|&j| !fixed[j])
            .max_by(|&a, &b| diag[a].total_cmp(&diag[b]));
        let lo = (0..cols)
            .filter(|&j| !fixed[j])
            .min_by(|&a, &b| diag[a].total_cmp(&diag[b]));
        let (Some(i), Some(j)) = (hi, lo) else { break };
        if (diag[i] - target).abs() <= 1e-14 * target {
            fixed[i] = true;
            continue;
        }
        if i == j {
            break;
        }
        let (a, b, g) = (diag[i], diag[j], weight(&v, i, j));
        let half = 0.5 * (a - b);
        let rho = (half * half + g * g).sqrt();
        let phi = g.atan2(half);
        let cos_arg = ((target - 0.5 * (a + b)) / rho).clamp(-1.0, 1.0);
        let theta = 0.5 * (cos_arg.acos() - phi);
        let (sn, cs) = theta.sin_cos();
        for c in 0..r {
            let (vi, vj) = (v[(i, c)], v[(j, c)]);
            v[(i, c)] = cs * vi - sn * vj;
            v[(j, c)] = sn * vi + cs * vj;
        }
        fixed[i] = true;
    }
    v
}

/// How the learner is scored: a target distribution plus the few-shot
/// known-environment data needed to place it in representation space.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub targets: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub dot_targets: Vec<DVector<f64>>,
    pub n_target: usize,
    pub dot_n_target: usize,
}

impl TargetSpec {
    pub fn single(w0: DVector<f64>, n_target: usize, dot_n_target: usize) -> Self {
        Self {
            targets: vec![w0.clone()],
            weights: vec![1.0],
            dot_targets: vec![w0],
            n_target,
            dot_n_target,
        }
    }

    pub fn mixture(
        targets: Vec<DVector<f64>>,
        weights: Vec<f64>,
        dot_targets: Vec<DVector<f64>>,
        n_target: usize,
        dot_n_target: usize,
    ) -> Result<Self> {
        let spec = Self {
            targets,
            weights,
            dot_targets,
            n_target,
            dot_n_target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() || self.targets.len() != self.weights.len() {
            return Err(Error::InvalidArgument(
                "target list must be non-empty with one weight per target".into(),
            ));
        }
        if self.weights.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument("target weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("target weights sum to {total}, not 1")));
        }
        if self.dot_targets.is_empty() {
            return Err(Error::InvalidArgument("known-target set is empty".into()));
        }
        let d = self.targets[0].len();
        if self.targets.iter().chain(&self.dot_targets).any(|w| w.len() != d) {
            return Err(Error::InvalidArgument("target vectors have inconsistent lengths".into()));
        }
        let dot = linalg::hstack(&self.dot_targets);
        let rank = linalg::numerical_rank(&dot, 1e-10);
        if rank < self.dot_targets.len() {
            return Err(Error::Singular {
                context: "known-target set",
                rank,
                required: self.dot_targets.len(),
            });
        }
        let mut all = self.dot_targets.clone();
        all.extend(self.targets.iter().cloned());
        if linalg::numerical_rank(&linalg::hstack(&all), 1e-10) > rank {
            return Err(Error::InvalidArgument(
                "known-target set does not span the target vectors".into(),
            ));
        }
        Ok(())
    }

    /// `Σ_ν p · w wᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.targets[0].len();
        let mut m = DMatrix::zeros(d, d);
        for (w, p) in self.targets.iter().zip(&self.weights) {
            m += w * w.transpose() * *p;
        }
        m
    }

    /// Index of the target assigned to each of `n` pooled draws.
    pub fn draw_assignments<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.targets.len() == 1 {
            return vec![0; n];
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in self.weights.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                self.weights.len() - 1
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_dims() -> Dimensions {
        Dimensions::linear(6, 4, 4, 2)
    }

    #[test]
    fn well_conditioned_block_has_flat_spectrum() {
        let gt = GroundTruthModel::generate(small_dims(), Conditioning::Well, Lifts::default(), 0.0, 11).unwrap();
        let sv = gt.b_w_source().singular_values();
        assert!((sv.min().powi(2) - 2.0).abs() < 1e-9);
        assert!(sv.max() / sv.min() <= 1.0 + 1e-6);
        assert!(linalg::orthonormality_defect(&gt.b_x) < 1e-10);
    }

    #[test]
    fn ill_conditioned_block_hits_kappa() {
        let dims = Dimensions::linear(20, 40, 40, 4);
        let gt = GroundTruthModel::generate(dims, Conditioning::Ill { kappa: 8.0 }, Lifts::default(), 1.0, 2).unwrap();
        let sv = gt.b_w_source().singular_values();
        let kappa = sv.max() / sv.min();
        assert!((kappa / 8.0 - 1.0).abs() < 0.01, "kappa {kappa}");
        for col in gt.b_w_source().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let bad = GroundTruthModel::generate(small_dims(), Conditioning::Ill { kappa: 0.5 }, Lifts::default(), 0.0, 1);
        assert!(matches!(bad, Err(Error::InvalidArgument(_))));
        let dims = Dimensions::linear(6, 4, 4, 5);
        assert!(GroundTruthModel::generate(dims, Conditioning::Well, Lifts::default(), 0.0, 1).is_err());
    }

    #[test]
    fn zero_task_gives_zero_labels() {
        let gt = GroundTruthModel::generate(small_dims(), Conditioning::Well, Lifts::default(), 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gt.sample(&DVector::zeros(4), 50, &mut rng).unwrap();
        assert!(s.labels.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn sample_rejects_outside_ball() {
        let gt = GroundTruthModel::generate(small_dims(), Conditioning::Well, Lifts::default(), 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = DVector::from_vec(vec![1.0, 0.1, 0.0, 0.0]);
        assert!(matches!(gt.sample(&w, 3, &mut rng), Err(Error::OutsideTaskSpace { .. })));
    }

    #[test]
    fn fourier_at_origin_with_zero_phase() {
        let op = FeatureOperator::Fourier {
            a: DMatrix::from_element(3, 2, 0.7),
            b: DVector::zeros(3),
        };
        let z = op.apply(&DVector::zeros(2)).unwrap();
        assert_eq!(z, DVector::from_element(3, 1.0));
    }

    #[test]
    fn pendulum_poly_layout() {
        let w = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let z = FeatureOperator::PendulumPoly.apply(&w).unwrap();
        let expected = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(z.as_slice(), &expected);
        let w = DVector::from_vec(vec![0.0, 0.0, 0.3, 0.4, 0.5, 1.0]);
        let z = FeatureOperator::PendulumPoly.apply(&w).unwrap();
        assert_eq!(&z.as_slice()[2..5], &[0.5, 0.3, 0.4]);
        assert_eq!(z[12], 1.0);
    }

    #[test]
    fn feature_dimension_mismatch() {
        let op = FeatureOperator::Identity { dim: 3 };
        assert!(matches!(op.apply(&DVector::zeros(2)), Err(Error::Mismatch { .. })));
    }

    #[test]
    fn target_spec_validation() {
        let e = |i: usize| {
            let mut v = DVector::zeros(3);
            v[i] = 1.0;
            v
        };
        assert!(TargetSpec::mixture(vec![e(0), e(1)], vec![0.5, 0.5], vec![e(0), e(1)], 10, 10).is_ok());
        assert!(TargetSpec::mixture(vec![e(0), e(1)], vec![0.5, 0.4], vec![e(0), e(1)], 10, 10).is_err());
        assert!(TargetSpec::mixture(vec![e(0), e(2)], vec![0.5, 0.5], vec![e(0), e(1)], 10, 10).is_err());
    }

    #[test]
    fn ball_sampling_stays_inside() {
        let space = TaskSpace::ball(5, 0..4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let w = space.sample_uniform(&mut rng);
            assert!(space.contains(&w));
            assert_eq!(w[4], 0.0);
        }
    }
}
