//! Euler integration of the learned velocity field with classifier-free
//! guidance, plus the single-step stochastic variant used for rollouts.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::backbone::{self, CondVars, ConditionBundle, DropFlags, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;

/// Upper clamp for the time fed into the noise schedule.
pub const SIGMA_T_MAX: f64 = 1.0 - 1e-4;

const NOISE_STREAM: u64 = 0x5830;
const STEP_STREAM: u64 = 0x5450;
const EPS_STREAM: u64 = 0x4550;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub noise_level_a: f64,
    pub stochastic_step_index: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 2.0,
            noise_level_a: 0.7,
            stochastic_step_index: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        if !(self.noise_level_a >= 0.0 && self.noise_level_a.is_finite()) {
            return Err(Error::Config(format!("noise_level_a {} must be >= 0", self.noise_level_a)));
        }
        if let Some(k) = self.stochastic_step_index {
            if k >= self.steps {
                return Err(Error::Config(format!("stochastic step {k} outside [0, {})", self.steps)));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }
}

/// Anything that maps `(x_t, t, condition)` to a velocity.
pub trait VelocityModel {
    fn feature_dim(&self) -> usize;
    fn velocity(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat>;
}

impl VelocityModel for Model {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn velocity(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat> {
        Ok(Model::velocity(self, x_t, t, cond)?.0)
    }
}

/// A model configuration paired with a borrowed parameter set.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl VelocityModel for Policy<'_> {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn velocity(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat> {
        Ok(backbone::velocity_with(self.config, self.params, x_t, t, cond)?.0)
    }
}

/// `v_uncond + s (v_cond - v_uncond)`; the unconditional pass drops every condition.
pub fn cfg_velocity(model: &impl VelocityModel, x_t: &Mat, t: f64, cond: &ConditionBundle, cfg_scale: f64) -> Result<Mat> {
    if !(cfg_scale >= 0.0) {
        return Err(Error::Config(format!("cfg_scale {cfg_scale} must be >= 0")));
    }
    let v_cond = model.velocity(x_t, t, cond)?;
    if cfg_scale == 1.0 {
        return Ok(v_cond);
    }
    let v_uncond = model.velocity(x_t, t, &cond.with_drop(DropFlags::ALL))?;
    if cfg_scale == 0.0 {
        return Ok(v_uncond);
    }
    Ok(&v_uncond + &((&v_cond - &v_uncond) * cfg_scale))
}

/// Guided velocity recorded on `g` with `params` as trainable leaves.
pub fn cfg_velocity_graph(
    g: &mut Graph,
    config: &ModelConfig,
    params: &ParamStore,
    x_t: &Mat,
    t: f64,
    cond: &ConditionBundle,
    cfg_scale: f64,
) -> Result<Var> {
    let x = g.constant(x_t.clone());
    let c = CondVars::constants(g, cond);
    let v_cond = backbone::forward(g, config, params, x, t, &c)?.velocity;
    if cfg_scale == 1.0 {
        return Ok(v_cond);
    }
    let u = CondVars {
        drop: DropFlags::ALL,
        ..c
    };
    let v_uncond = backbone::forward(g, config, params, x, t, &u)?.velocity;
    if cfg_scale == 0.0 {
        return Ok(v_uncond);
    }
    let diff = g.sub(v_cond, v_uncond);
    let scaled = g.scale(diff, cfg_scale);
    Ok(g.add(v_uncond, scaled))
}

/// `a sqrt(t / (1 - t))`, with `t` clamped below 1.
pub fn sigma_schedule(t: f64, a: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("noise schedule time {t} is negative")));
    }
    let t = t.min(SIGMA_T_MAX);
    Ok(a * (t / (1.0 - t)).sqrt())
}

pub fn initial_noise(frames: usize, dim: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed, &[NOISE_STREAM]);
    Array2::from_shape_fn((frames, dim), |_| r.sample::<f64, _>(StandardNormal))
}

fn injected_noise(frames: usize, dim: usize, seed: u64) -> Mat {
    let mut r = rng::stream(seed, &[EPS_STREAM]);
    Array2::from_shape_fn((frames, dim), |_| r.sample::<f64, _>(StandardNormal))
}

fn euler(model: &impl VelocityModel, x: &Mat, k: usize, cond: &ConditionBundle, config: &SamplerConfig) -> Result<Mat> {
    let v = cfg_velocity(model, x, config.time(k), cond, config.cfg_scale)?;
    Ok(x + &(v * config.dt()))
}

/// Deterministic Euler sample from `x0`.
pub fn integrate(model: &impl VelocityModel, cond: &ConditionBundle, config: &SamplerConfig, x0: Mat) -> Result<Mat> {
    config.validate()?;
    let mut x = x0;
    for k in 0..config.steps {
        x = euler(model, &x, k, cond, config)?;
    }
    Ok(x)
}

pub fn sample_ode(model: &impl VelocityModel, cond: &ConditionBundle, config: &SamplerConfig, seed: u64) -> Result<Mat> {
    if config.stochastic_step_index.is_some() {
        return Err(Error::Contract("ODE sampling takes no stochastic step".into()));
    }
    let x0 = initial_noise(cond.frames(), model.feature_dim(), seed);
    integrate(model, cond, config, x0)
}

/// Everything needed to replay a rollout and score its stochastic transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub config: SamplerConfig,
    pub x0: Mat,
    /// `steps + 1` states, from `x0` to `x1`.
    pub states: Vec<Mat>,
    pub stochastic_step: Option<usize>,
    pub noise: Mat,
    /// Standard deviation of the stochastic transition, `sigma_{t'} sqrt(dt)`.
    pub transition_std: f64,
    /// Transition mean under the generating parameters.
    pub transition_mean: Mat,
}

impl RolloutRecord {
    pub fn x1(&self) -> &Mat {
        self.states.last().expect("at least one state")
    }

    /// `(x_{t'}, x_{t'+1}, t', std)`.
    pub fn transition(&self) -> Result<(&Mat, &Mat, usize, f64)> {
        let k = self
            .stochastic_step
            .ok_or_else(|| Error::Contract("rollout has no stochastic step".into()))?;
        if k + 1 >= self.states.len() {
            return Err(Error::Contract(format!("stochastic step {k} outside the stored states")));
        }
        Ok((&self.states[k], &self.states[k + 1], k, self.transition_std))
    }
}

fn stochastic_step(config: &SamplerConfig, seed: u64) -> usize {
    config
        .stochastic_step_index
        .unwrap_or_else(|| rng::stream(seed, &[STEP_STREAM]).random_range(0..config.steps))
}

/// Euler sampling with Gaussian noise injected at one step.
pub fn sample_sde_rollout(
    model: &impl VelocityModel,
    cond: &ConditionBundle,
    config: &SamplerConfig,
    seed: u64,
) -> Result<RolloutRecord> {
    config.validate()?;
    let frames = cond.frames();
    let dim = model.feature_dim();
    let x0 = initial_noise(frames, dim, seed);
    let k_star = stochastic_step(config, seed);
    let noise = injected_noise(frames, dim, seed);
    let std = sigma_schedule(config.time(k_star), config.noise_level_a)? * config.dt().sqrt();
    let mut states = Vec::with_capacity(config.steps + 1);
    states.push(x0.clone());
    let mut transition_mean = Array2::zeros((frames, dim));
    for k in 0..config.steps {
        let x = states.last().expect("non-empty");
        let mut next = euler(model, x, k, cond, config)?;
        if k == k_star {
            transition_mean = next.clone();
            next.scaled_add(std, &noise);
        }
        states.push(next);
    }
    Ok(RolloutRecord {
        config: SamplerConfig {
            stochastic_step_index: Some(k_star),
            ..*config
        },
        x0,
        states,
        stochastic_step: Some(k_star),
        noise,
        transition_std: std,
        transition_mean,
    })
}

/// Re-executes a rollout from its stored initial state and noise.
pub fn replay(model: &impl VelocityModel, cond: &ConditionBundle, record: &RolloutRecord) -> Result<Mat> {
    let k_star = record
        .stochastic_step
        .ok_or_else(|| Error::Contract("rollout has no stochastic step".into()))?;
    let config = &record.config;
    let mut x = record.x0.clone();
    for k in 0..config.steps {
        x = euler(model, &x, k, cond, config)?;
        if k == k_star {
            x.scaled_add(record.transition_std, &record.noise);
        }
    }
    Ok(x)
}

/// Transition mean `x_{t'} + dt v_cfg(x_{t'}, t')` under `model`.
pub fn transition_mean(model: &impl VelocityModel, cond: &ConditionBundle, record: &RolloutRecord) -> Result<Mat> {
    let (x, _, k, _) = record.transition()?;
    euler(model, x, k, cond, &record.config)
}

/// Isotropic Gaussian log-density summed over all entries.
pub fn gaussian_log_density(x: &Mat, mean: &Mat, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::Degenerate(format!("transition std {std} is not positive")));
    }
    if x.dim() != mean.dim() {
        return Err(Error::Shape("sample and mean shapes differ".into()));
    }
    let n = x.len() as f64;
    let sq: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * std * std) - n * (std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()))
}

/// Log-density of the recorded stochastic transition under `model`.
pub fn transition_log_prob(model: &impl VelocityModel, cond: &ConditionBundle, record: &RolloutRecord) -> Result<f64> {
    let (_, next, _, std) = record.transition()?;
    let mean = transition_mean(model, cond, record)?;
    gaussian_log_density(next, &mean, std)
}
