//! Experiment configuration, read from TOML.
//!
//! ```toml
//! scenario = "synthetic-bilinear"
//! seeds = [0, 1, 2]
//! strategies = ["passive", "target-aware"]
//!
//! [dims]
//! d_x = 40
//! d_psi_x = 40
//! d_w = 40
//! d_w_source = 40
//! d_psi_w = 40
//! k = 4
//!
//! [target]
//! kind = "weak-direction"
//! n_target = 2000
//! dot_n_target = 500
//!
//! [budgets]
//! n0 = 800.0
//! n1 = 400.0
//! epochs = 4
//! ```
//!
//! Every table rejects unknown keys. Omitted tables take their defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, N2Policy, StageBudgets, Strategy};
use crate::linalg;
use crate::model::{Conditioning, Dimensions, FeatureKind, GroundTruthModel, Lifts, TargetSpec};
use crate::oracles::TrainConfig;
use crate::pendulum::{PendulumSimulator, SimulatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SyntheticBilinear,
    SyntheticFourier,
    Pendulum,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::SyntheticBilinear => "synthetic-bilinear",
            Scenario::SyntheticFourier => "synthetic-fourier",
            Scenario::Pendulum => "pendulum",
        }
    }
}

/// Target distribution, resolved against the planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum TargetKind {
    Single { w: Vec<f64> },
    /// Standard basis vector `e_index`.
    Axis { index: usize },
    /// Right singular vector of the true source block for its smallest
    /// singular value.
    WeakDirection,
    /// Equal-weight mixture over every source axis.
    UniformAxes,
    Mixture {
        targets: Vec<Vec<f64>>,
        weights: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dot_targets: Option<Vec<Vec<f64>>>,
    },
    /// The simulator's hidden environment, seen only through its dummy bit.
    Hidden,
}

// Unknown keys are rejected by the flattened kind, which sees every key the
// struct does not consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    #[serde(flatten)]
    pub kind: TargetKind,
    pub n_target: usize,
    pub dot_n_target: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_n_test() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    Explicit,
    Theory,
}

/// Stage budgets. Explicit mode takes the warmup total `n0` and the
/// exploration scale `n1` directly; theory mode derives both from the
/// worst-case formulas with plug-ins `kappa_bar` (default `√d_W`) and
/// `sigma_low` (default 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "explicit")]
    pub mode: BudgetMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_low: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "formula")]
    pub n2: N2Policy,
    #[serde(default = "one")]
    pub beta1: f64,
    #[serde(default = "one")]
    pub beta2: f64,
    #[serde(default = "eight")]
    pub beta3: f64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_cap: Option<usize>,
}

fn explicit() -> BudgetMode {
    BudgetMode::Explicit
}
fn default_delta() -> f64 {
    0.1
}
fn formula() -> N2Policy {
    N2Policy::Formula
}
fn one() -> f64 {
    1.0
}
fn eight() -> f64 {
    8.0
}

impl BudgetConfig {
    pub fn resolve(&self, dims: &Dimensions) -> Result<StageBudgets> {
        let mut b = match self.mode {
            BudgetMode::Explicit => {
                let (Some(n0), Some(n1)) = (self.n0, self.n1) else {
                    return Err(Error::Config("explicit budgets need both budgets.n0 and budgets.n1".into()));
                };
                StageBudgets::explicit(0, n1, self.epochs).with_n0_scale(n0)
            }
            BudgetMode::Theory => {
                if self.n0.is_some() || self.n1.is_some() {
                    return Err(Error::Config("theory budgets derive n0 and n1; remove them".into()));
                }
                StageBudgets::theory(
                    dims.d_psi_x,
                    dims.d_w,
                    dims.k,
                    self.kappa_bar.unwrap_or((dims.d_w as f64).sqrt()),
                    self.sigma_low.unwrap_or(1.0),
                    self.delta,
                    self.epochs,
                )
            }
        };
        b.n2_policy = self.n2;
        b.beta1 = self.beta1;
        b.beta2 = self.beta2;
        b.beta3 = self.beta3;
        b.budget_cap = self.budget_cap;
        b.validate()?;
        Ok(b)
    }
}

/// Closed-loop evaluation of the learned pendulum residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub kp: f64,
    pub kd: f64,
    pub horizon: usize,
    pub theta0: f64,
    pub theta_dot0: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            kp: 4.0,
            kd: 4.0,
            horizon: 300,
            theta0: 1.0,
            theta_dot0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumConfig {
    #[serde(default = "main_pendulum_target")]
    pub hidden_target: Vec<f64>,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default)]
    pub control: ControlConfig,
}

fn main_pendulum_target() -> Vec<f64> {
    vec![0.0, 0.0, 1.0, 0.5, 0.0, 0.0]
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            hidden_target: main_pendulum_target(),
            simulator: SimulatorConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Exponent in the long-term task threshold `ε^{-alpha}`.
    pub alpha: f64,
    /// Ridge for the target fine-tune.
    pub ridge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 1.0, ridge: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub fourier_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dimensions>,
    #[serde(default = "well")]
    pub conditioning: Conditioning,
    pub target: TargetConfig,
    pub budgets: BudgetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pendulum: Option<PendulumConfig>,
}

fn well() -> Conditioning {
    Conditioning::Well
}

/// What a single seed runs against.
pub enum Environment {
    Synthetic(GroundTruthModel),
    Pendulum(PendulumSimulator),
}

impl Environment {
    pub fn sampler(&self) -> &dyn crate::model::TaskSampler {
        match self {
            Environment::Synthetic(gt) => gt,
            Environment::Pendulum(sim) => sim,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Dimensions of the scenario: declared for synthetic runs, fixed by the
    /// simulator for the pendulum.
    pub fn dimensions(&self) -> Result<Dimensions> {
        match (self.scenario, &self.dims) {
            (Scenario::Pendulum, None) => Ok(self.pendulum_config().simulator.dims()),
            (Scenario::Pendulum, Some(_)) => Err(Error::Config(
                "pendulum dimensions come from [pendulum.simulator]; remove [dims]".into(),
            )),
            (_, Some(d)) => Ok(*d),
            (_, None) => Err(Error::Config("missing required table [dims]".into())),
        }
    }

    pub fn pendulum_config(&self) -> PendulumConfig {
        self.pendulum.clone().unwrap_or_default()
    }

    pub fn stage_budgets(&self) -> Result<StageBudgets> {
        self.budgets.resolve(&self.dimensions()?)
    }

    pub fn lifts(&self) -> Lifts {
        Lifts {
            psi_x: match self.scenario {
                Scenario::SyntheticBilinear => FeatureKind::Identity,
                _ => FeatureKind::Fourier,
            },
            psi_w: FeatureKind::Identity,
            fourier_scale: self.fourier_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must list at least one strategy".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.strategies {
            if !seen.insert(*s) {
                return Err(Error::Config(format!("duplicate strategy `{}`", s.name())));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(Error::Config(format!("duplicate seed {s}")));
            }
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.fourier_scale > 0.0) {
            return Err(Error::Config("fourier_scale must be positive".into()));
        }
        let dims = self.dimensions()?;
        dims.validate().map_err(|e| Error::Config(format!("[dims]: {e}")))?;
        if self.scenario == Scenario::SyntheticBilinear && dims.d_psi_x != dims.d_x {
            return Err(Error::Config("synthetic-bilinear needs dims.d_psi_x = dims.d_x".into()));
        }
        if self.scenario != Scenario::Pendulum && dims.d_psi_w != dims.d_w {
            return Err(Error::Config("synthetic scenarios need dims.d_psi_w = dims.d_w".into()));
        }
        if self.scenario != Scenario::Pendulum && self.pendulum.is_some() {
            return Err(Error::Config("[pendulum] only applies to the pendulum scenario".into()));
        }
        if let Conditioning::Ill { kappa } = self.conditioning {
            if !(kappa >= 1.0) {
                return Err(Error::Config(format!("conditioning.kappa must be >= 1, got {kappa}")));
            }
        }
        let hidden = matches!(self.target.kind, TargetKind::Hidden);
        if hidden != (self.scenario == Scenario::Pendulum) {
            return Err(Error::Config(
                "target kind `hidden` is required for, and only valid with, the pendulum scenario".into(),
            ));
        }
        if self.target.n_target < dims.k || self.target.dot_n_target < dims.k {
            return Err(Error::Config(format!(
                "target.n_target and target.dot_n_target must be >= k = {}",
                dims.k
            )));
        }
        if self.target.n_test == 0 {
            return Err(Error::Config("target.n_test must be positive".into()));
        }
        self.check_target_shape(&dims)?;
        if self.scenario == Scenario::Pendulum {
            let p = self.pendulum_config();
            p.simulator.validate()?;
            if p.hidden_target.len() != 6 {
                return Err(Error::Config("pendulum.hidden_target must have 6 entries".into()));
            }
            if p.hidden_target[5] != 0.0 {
                return Err(Error::Config("pendulum.hidden_target must have dummy entry 0".into()));
            }
            if !(p.control.kp > 0.0) || !(p.control.kd > 0.0) || p.control.horizon == 0 {
                return Err(Error::Config("pendulum.control gains and horizon must be positive".into()));
            }
        }
        self.stage_budgets()?;
        self.train.validate()?;
        self.learner.validate()?;
        Ok(())
    }

    fn check_target_shape(&self, dims: &Dimensions) -> Result<()> {
        let bad_len = |v: &[f64]| v.len() != dims.d_w;
        match &self.target.kind {
            TargetKind::Single { w } if bad_len(w) => Err(Error::Config(format!(
                "target.w has {} entries, dims.d_w = {}",
                w.len(),
                dims.d_w
            ))),
            TargetKind::Axis { index } if *index >= dims.d_w => {
                Err(Error::Config(format!("target.index {index} >= dims.d_w = {}", dims.d_w)))
            }
            TargetKind::Mixture { targets, weights, dot_targets } => {
                if targets.len() != weights.len() {
                    return Err(Error::Config("target.targets and target.weights differ in length".into()));
                }
                if targets.iter().chain(dot_targets.iter().flatten()).any(|t| bad_len(t)) {
                    return Err(Error::Config(format!("every target vector needs dims.d_w = {} entries", dims.d_w)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Planted model or simulator for one seed.
    pub fn environment(&self, seed: u64) -> Result<Environment> {
        match self.scenario {
            Scenario::Pendulum => {
                let p = self.pendulum_config();
                let hidden = DVector::from_vec(p.hidden_target.clone());
                Ok(Environment::Pendulum(PendulumSimulator::new(p.simulator, hidden, seed)?))
            }
            _ => Ok(Environment::Synthetic(GroundTruthModel::generate(
                self.dimensions()?,
                self.conditioning,
                self.lifts(),
                self.sigma,
                seed,
            )?)),
        }
    }

    /// Target distribution for `env`.
    pub fn target_spec(&self, env: &Environment) -> Result<TargetSpec> {
        let (n, dn) = (self.target.n_target, self.target.dot_n_target);
        let dims = *env.sampler().dims();
        let spec = match (&self.target.kind, env) {
            (TargetKind::Hidden, Environment::Pendulum(_)) => TargetSpec::single(PendulumSimulator::observed_target(), n, dn),
            (TargetKind::Single { w }, _) => TargetSpec::single(DVector::from_column_slice(w), n, dn),
            (TargetKind::Axis { index }, _) => {
                TargetSpec::single(DVector::from_fn(dims.d_w, |i, _| if i == *index { 1.0 } else { 0.0 }), n, dn)
            }
            (TargetKind::WeakDirection, Environment::Synthetic(gt)) => {
                let svd = linalg::svd_sorted(&gt.b_w_source());
                let v = svd.v.column(dims.k - 1).into_owned();
                let mut w = DVector::zeros(dims.d_w);
                w.rows_mut(0, v.len()).copy_from(&v);
                TargetSpec::single(w, n, dn)
            }
            (TargetKind::UniformAxes, _) => {
                let axes: Vec<DVector<f64>> = (0..dims.d_w_source)
                    .map(|a| DVector::from_fn(dims.d_w, |i, _| if i == a { 1.0 } else { 0.0 }))
                    .collect();
                let p = 1.0 / axes.len() as f64;
                TargetSpec::mixture(axes.clone(), vec![p; axes.len()], axes, n, dn)?
            }
            (TargetKind::Mixture { targets, weights, dot_targets }, _) => {
                let to_vecs = |vs: &Vec<Vec<f64>>| vs.iter().map(|v| DVector::from_column_slice(v)).collect::<Vec<_>>();
                let ts = to_vecs(targets);
                let dots = match dot_targets {
                    Some(d) => to_vecs(d),
                    None => independent_subset(&ts),
                };
                TargetSpec::mixture(ts, weights.clone(), dots, n, dn)?
            }
            (kind, _) => {
                return Err(Error::Config(format!("target kind {kind:?} does not apply to this scenario")));
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Greedy linearly independent subset, used as the known-target set when a
/// mixture does not list one.
fn independent_subset(vs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vs {
        let mut trial = out.clone();
        trial.push(v.clone());
        if linalg::numerical_rank(&linalg::hstack(&trial), 1e-10) == trial.len() {
            out = trial;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
scenario = "synthetic-bilinear"
seeds = [1]
strategies = ["target-aware"]

[dims]
d_x = 8
d_psi_x = 8
d_w = 6
d_w_source = 6
d_psi_w = 6
k = 2

[target]
kind = "axis"
index = 0
n_target = 50
dot_n_target = 20

[budgets]
n0 = 60.0
n1 = 20.0
epochs = 2
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = cfg.stage_budgets().unwrap();
        assert_eq!((b.beta1, b.beta2, b.beta3), (1.0, 1.0, 8.0));
        assert_eq!(b.n0(), 60);
        assert_eq!(cfg.sigma, 1.0);
        assert_eq!(cfg.target.n_test, 2000);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn k_above_lifted_task_dim_names_both_keys() {
        let text = MINIMAL.replace("k = 2", "k = 7");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("k") && err.contains("d_psi_w"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("epochs = 2", "epochs = 2\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("[budgets]", "colour = \"red\"\n[budgets]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("index = 0", "index = 0\nw = [1.0]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("seeds = [1]", "seeds = [1]\nbogus = true");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn duplicate_strategy_and_empty_seeds() {
        let text = MINIMAL.replace(r#"["target-aware"]"#, r#"["passive", "passive"]"#);
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("duplicate"));
        let text = MINIMAL.replace("seeds = [1]", "seeds = []");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn theory_budgets_are_large() {
        let text = MINIMAL.replace("n0 = 60.0\nn1 = 20.0", "mode = \"theory\"");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        // κ̄² = d_W = 6, σ̲ = 1, δ = 0.1.
        let expect = 6.0 * (8.0 * 8.0 * 6.0 + 6f64.powf(1.5) * (2.0 + 10f64.ln()).sqrt());
        assert_eq!(cfg.stage_budgets().unwrap().n0(), expect.ceil() as usize);
    }
}
