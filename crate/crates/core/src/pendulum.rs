//! Multi-environment pendulum with a learned residual term.
//!
//! Dynamics: `m l² θ̈ − m l ĝ sin θ = u + f(θ, θ̇, w)` with
//! `w = [c_x, c_y, α₁, α₂, ĝ-knob, dummy]`. The residual collects wind drag,
//! linear and quadratic damping, and the gravity mismatch `m l (g − ĝ) sin θ`.
//! The knob sets `ĝ = g_hat_base + g_hat_gain · w[4]`; the defaults read
//! `w[4]` as `ĝ` itself, so the mismatch is linear in the task vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Dimensions, FeatureOperator, TaskSample, TaskSampler, TaskSpace, PENDULUM_FEATURE_DIM, PENDULUM_TASK_DIM,
};
use crate::seed::{SeedStream, Stream};

const DUMMY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub m: f64,
    pub l: f64,
    pub g_true: f64,
    pub g_hat_base: f64,
    pub g_hat_gain: f64,
    pub dt: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            l: 1.0,
            g_true: 9.81,
            g_hat_base: 0.0,
            g_hat_gain: 1.0,
            dt: 0.02,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("l", self.l), ("dt", self.dt)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("pendulum.{name} must be positive, got {v}")));
            }
        }
        if !self.g_true.is_finite() || !self.g_hat_base.is_finite() || !self.g_hat_gain.is_finite() {
            return Err(Error::Config("pendulum gravity parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumEnv {
    pub w: DVector<f64>,
    pub m: f64,
    pub l: f64,
    pub g_true: f64,
    pub g_hat: f64,
    pub dt: f64,
}

impl PendulumEnv {
    pub fn new(w: DVector<f64>, params: &PendulumParams) -> Result<Self> {
        if w.len() != PENDULUM_TASK_DIM {
            return Err(Error::Mismatch {
                expected: PENDULUM_TASK_DIM,
                got: w.len(),
                context: "pendulum task vector",
            });
        }
        params.validate()?;
        Ok(Self {
            g_hat: params.g_hat_base + params.g_hat_gain * w[4],
            w,
            m: params.m,
            l: params.l,
            g_true: params.g_true,
            dt: params.dt,
        })
    }

    pub fn wind(&self) -> (f64, f64) {
        (self.w[0], self.w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    pub fn norm(&self) -> f64 {
        self.theta.hypot(self.theta_dot)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

fn cross2(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

/// Residual torque `f(θ, θ̇, w)`.
pub fn residual_f(s: &PendulumState, env: &PendulumEnv) -> f64 {
    let (st, ct) = s.theta.sin_cos();
    let l = env.l;
    let (cx, cy) = env.wind();
    let r = (cx - l * s.theta_dot * ct, cy + l * s.theta_dot * st);
    let r2 = r.0 * r.0 + r.1 * r.1;
    let force = (r2 * r.0, r2 * r.1);
    let l_vec = (l * st, -l * ct);
    let (a1, a2) = (env.w[2], env.w[3]);
    cross2(l_vec, force) - a1 * s.theta_dot - a2 * s.theta_dot * s.theta_dot.abs()
        + env.m * l * (env.g_true - env.g_hat) * st
}

fn accel(s: &PendulumState, u: f64, env: &PendulumEnv) -> f64 {
    (u + residual_f(s, env) + env.m * env.l * env.g_hat * s.theta.sin()) / (env.m * env.l * env.l)
}

/// One RK4 step of length `dt` with `u` held constant.
pub fn step_dt(s: &PendulumState, u: f64, env: &PendulumEnv, dt: f64) -> Result<PendulumState> {
    let deriv = |x: &PendulumState| (x.theta_dot, accel(x, u, env));
    let shift = |x: &PendulumState, d: (f64, f64), h: f64| PendulumState::new(x.theta + h * d.0, x.theta_dot + h * d.1);
    let k1 = deriv(s);
    let k2 = deriv(&shift(s, k1, dt / 2.0));
    let k3 = deriv(&shift(s, k2, dt / 2.0));
    let k4 = deriv(&shift(s, k3, dt));
    let next = PendulumState::new(
        s.theta + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        s.theta_dot + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    );
    if !next.is_finite() {
        return Err(Error::Diverged(format!("pendulum state became non-finite from {s:?}")));
    }
    Ok(next)
}

pub fn step(s: &PendulumState, u: f64, env: &PendulumEnv) -> Result<PendulumState> {
    step_dt(s, u, env, env.dt)
}

/// Stochastic data-collection policy: PD toward random setpoints plus
/// Gaussian control noise, with periodic state resets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Excitation {
    pub kp: f64,
    pub kd: f64,
    pub setpoint_range: f64,
    pub hold_steps: usize,
    pub reset_steps: usize,
    pub control_noise: f64,
    pub max_speed: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self {
            kp: 16.0,
            kd: 6.0,
            setpoint_range: 1.5,
            hold_steps: 25,
            reset_steps: 100,
            control_noise: 2.0,
            max_speed: 3.0,
        }
    }
}

impl Excitation {
    pub fn validate(&self) -> Result<()> {
        if self.hold_steps == 0 || self.reset_steps == 0 {
            return Err(Error::Config("excitation step counts must be positive".into()));
        }
        if !(self.setpoint_range > 0.0) || !(self.max_speed > 0.0) || !(self.control_noise >= 0.0) {
            return Err(Error::Config("excitation ranges must be positive".into()));
        }
        Ok(())
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> PendulumState {
        PendulumState::new(
            rng.random_range(-self.setpoint_range..=self.setpoint_range),
            rng.random_range(-1.0..=1.0),
        )
    }
}

/// `n` visited states with labels `f(x, w) + ξ`, `ξ ~ N(0, noise_sigma²)`.
pub fn collect_data(
    env: &PendulumEnv,
    policy: &Excitation,
    n: usize,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskSample> {
    let mut inputs = DMatrix::zeros(n, 2);
    let mut labels = DVector::zeros(n);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ctrl_noise = Normal::new(0.0, policy.control_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut s = policy.reset(rng);
    let mut setpoint = 0.0;
    let ml = env.m * env.l;
    for i in 0..n {
        if i % policy.reset_steps == 0 && i > 0 || s.theta_dot.abs() > policy.max_speed || s.theta.abs() > std::f64::consts::PI {
            s = policy.reset(rng);
        }
        if i % policy.hold_steps == 0 {
            setpoint = rng.random_range(-policy.setpoint_range..=policy.setpoint_range);
        }
        inputs[(i, 0)] = s.theta;
        inputs[(i, 1)] = s.theta_dot;
        labels[i] = residual_f(&s, env) + if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        let u = -ml * env.g_hat * s.theta.sin()
            - ml * env.l * (policy.kp * (s.theta - setpoint) + policy.kd * s.theta_dot)
            + ctrl_noise.sample(rng);
        s = step(&s, u, env)?;
    }
    Ok(TaskSample {
        w: env.w.clone(),
        inputs,
        labels,
    })
}

/// Mean `‖x‖` over `horizon` steps of `u = −m l ĝ sin θ − f̂ − m l² (K_P θ + K_D θ̇)`
/// against the true dynamics.
pub fn control_rollout(
    env: &PendulumEnv,
    f_hat: &dyn Fn(&PendulumState) -> f64,
    kp: f64,
    kd: f64,
    horizon: usize,
    x0: PendulumState,
) -> Result<f64> {
    if !(kp > 0.0) || !(kd > 0.0) {
        return Err(Error::InvalidArgument("controller gains must be positive".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let ml = env.m * env.l;
    let mut s = x0;
    let mut total = 0.0;
    for _ in 0..horizon {
        let u = -ml * env.g_hat * s.theta.sin() - f_hat(&s) - ml * env.l * (kp * s.theta + kd * s.theta_dot);
        s = step(&s, u, env)?;
        if s.norm() > 1e3 {
            return Err(Error::Diverged(format!("controller lost the pendulum at {s:?}")));
        }
        total += s.norm();
    }
    Ok(total / horizon as f64)
}

/// Linear residual model `f̂(x) = ψ_X(x)ᵀ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub psi_x: FeatureOperator,
    pub coef: DVector<f64>,
}

impl ResidualModel {
    pub fn predict(&self, s: &PendulumState) -> f64 {
        let x = DVector::from_vec(vec![s.theta, s.theta_dot]);
        match self.psi_x.apply(&x) {
            Ok(phi) => phi.dot(&self.coef),
            Err(_) => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub params: PendulumParams,
    pub excitation: Excitation,
    pub d_psi_x: usize,
    pub k: usize,
    pub noise_variance: f64,
    pub fourier_scale: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            excitation: Excitation::default(),
            d_psi_x: 60,
            k: 8,
            noise_variance: 0.5,
            fourier_scale: 0.5,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.excitation.validate()?;
        if !(self.noise_variance >= 0.0) || !(self.fourier_scale > 0.0) {
            return Err(Error::Config("pendulum noise variance and fourier scale must be positive".into()));
        }
        self.dims().validate()
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions {
            d_x: 2,
            d_psi_x: self.d_psi_x,
            d_w: PENDULUM_TASK_DIM,
            d_w_source: PENDULUM_TASK_DIM - 1,
            d_psi_w: PENDULUM_FEATURE_DIM,
            k: self.k,
        }
    }
}

/// Task sampler over pendulum environments. Source tasks are physical
/// parameter vectors with dummy 0; the target `[0, 0, 0, 0, 0, 1]` stands for
/// a hidden environment only the simulator knows.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumSimulator {
    pub config: SimulatorConfig,
    pub hidden_target: DVector<f64>,
    dims: Dimensions,
    psi_x: FeatureOperator,
    psi_w: FeatureOperator,
}

impl PendulumSimulator {
    pub fn new(config: SimulatorConfig, hidden_target: DVector<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if hidden_target.len() != PENDULUM_TASK_DIM || hidden_target[DUMMY] != 0.0 {
            return Err(Error::InvalidArgument(
                "hidden target must be a physical 6-vector with dummy 0".into(),
            ));
        }
        let mut rng = SeedStream::new(seed).stream(Stream::Truth).rng();
        let psi_x = FeatureOperator::fourier(&mut rng, 2, config.d_psi_x, config.fourier_scale);
        Ok(Self {
            dims: config.dims(),
            config,
            hidden_target,
            psi_x,
            psi_w: FeatureOperator::PendulumPoly,
        })
    }

    /// The task vector the learner sees for the hidden environment.
    pub fn observed_target() -> DVector<f64> {
        let mut w = DVector::zeros(PENDULUM_TASK_DIM);
        w[DUMMY] = 1.0;
        w
    }

    pub fn env(&self, w: &DVector<f64>) -> Result<PendulumEnv> {
        PendulumEnv::new(w.clone(), &self.config.params)
    }

    pub fn target_env(&self) -> Result<PendulumEnv> {
        self.env(&self.hidden_target)
    }

    /// Resolve the dummy bit to the environment that generates the data.
    fn physical(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != PENDULUM_TASK_DIM {
            return Err(Error::Mismatch {
                expected: PENDULUM_TASK_DIM,
                got: w.len(),
                context: "pendulum task vector",
            });
        }
        if w[DUMMY] == 0.0 {
            Ok(w.clone())
        } else if *w == Self::observed_target() {
            Ok(self.hidden_target.clone())
        } else {
            Err(Error::InvalidArgument(format!("unknown pendulum target {:?}", w.as_slice())))
        }
    }
}

impl TaskSampler for PendulumSimulator {
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
        self.config.noise_variance.sqrt()
    }

    fn source_space(&self) -> TaskSpace {
        TaskSpace::ball(PENDULUM_TASK_DIM, 0..PENDULUM_TASK_DIM - 1)
    }

    fn sample(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        self.source_space().check(w)?;
        let env = self.env(w)?;
        collect_data(&env, &self.config.excitation, n, self.noise_sigma(), rng)
    }

    fn sample_target(&self, w: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        let env = self.env(&self.physical(w)?)?;
        let mut sample = collect_data(&env, &self.config.excitation, n, self.noise_sigma(), rng)?;
        sample.w = w.clone();
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn env(w: [f64; 6]) -> PendulumEnv {
        let params = PendulumParams {
            g_hat_base: 9.81,
            ..PendulumParams::default()
        };
        PendulumEnv::new(DVector::from_row_slice(&w), &params).unwrap()
    }

    #[test]
    fn residual_vanishes_at_rest_without_wind() {
        let e = env([0.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
        assert_eq!(residual_f(&PendulumState::new(0.0, 0.0), &e), 0.0);
    }

    #[test]
    fn drag_expansion_without_wind() {
        // c = 0: f = -l⁴ θ̇³ cos 2θ - α₁ θ̇.
        let e = env([0.0, 0.0, 0.7, 0.0, 0.0, 0.0]);
        for &(t, td) in &[(0.3, 1.1), (-1.2, 0.4), (2.0, -0.8), (0.0, 2.0), (-0.5, -1.5)] {
            let f = residual_f(&PendulumState::new(t, td), &e);
            let expect = -td * td * td * (2.0 * t).cos() - 0.7 * td;
            assert!((f - expect).abs() < 1e-12, "{f} vs {expect}");
        }
    }

    #[test]
    fn gravity_knob_enters_linearly() {
        let e = env([0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let s = PendulumState::new(0.4, 0.0);
        assert!((residual_f(&s, &e) + 0.5 * 0.4f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn cancelling_control_holds_state() {
        let e = env([0.3, -0.2, 0.5, 0.1, 0.2, 0.0]);
        let s = PendulumState::new(0.6, 0.0);
        let u = -residual_f(&s, &e) - e.m * e.l * e.g_hat * s.theta.sin();
        let next = step(&s, u, &e).unwrap();
        assert!((next.theta - s.theta).abs() < 1e-9);
        assert!(next.theta_dot.abs() < 1e-9);
    }

    #[test]
    fn collection_without_noise_on_zero_residual() {
        let e = env([0.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = collect_data(&e, &Excitation::default(), 50, 0.0, &mut rng).unwrap();
        assert_eq!(s.len(), 50);
        // f = -θ̇³ cos 2θ from drag remains even without wind.
        for i in 0..50 {
            let st = PendulumState::new(s.inputs[(i, 0)], s.inputs[(i, 1)]);
            assert_eq!(s.labels[i], residual_f(&st, &e));
        }
        assert!(collect_data(&e, &Excitation::default(), 0, 0.0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn observed_target_resolves_to_hidden_env() {
        let hidden = DVector::from_row_slice(&[0.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
        let sim = PendulumSimulator::new(SimulatorConfig::default(), hidden.clone(), 4).unwrap();
        assert_eq!(sim.physical(&PendulumSimulator::observed_target()).unwrap(), hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sim.sample(&PendulumSimulator::observed_target(), 5, &mut rng).is_err());
    }
}
