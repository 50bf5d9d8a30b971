//! Rectified-flow conventions, few-step schedules and samplers.
//!
//! Orientation used everywhere in this crate: `x_t = (1 - t) x0 + t eps`, so
//! `t = 0` is data and `t = 1` is pure noise. Networks predict the velocity
//! `v = eps - x0`, and the solver recovers `x0_hat = x_t - t v`.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest timestep accepted by [`target_velocity`].
pub const T_FLOOR: f64 = 1e-3;

/// Anything that predicts a velocity for a labelled batch.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, x: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Scalar> VelocityField<T> for Mlp<T> {
    fn velocity(&self, x: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        self.predict(x, t, labels)
    }
}

impl<T: Scalar, F: VelocityField<T> + ?Sized> VelocityField<T> for &F {
    fn velocity(&self, x: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        (**self).velocity(x, t, labels)
    }
}

fn check_time<T: Scalar>(t: T) -> Result<()> {
    if t.is_finite() && t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")))
    }
}

/// `(1 - t) x0 + t eps`.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    check_time(t)?;
    let s = T::one() - t;
    x0.zip_with(eps, "forward_diffuse", |a, e| s * a + t * e)
}

/// `x_t - t v`.
pub fn solve_to_x0<T: Scalar>(v: &Tensor<T>, x_t: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    check_time(t)?;
    x_t.zip_with(v, "solve_to_x0", |x, v| x - t * v)
}

/// Velocity whose solver output at `(x_t, t)` is `x_tar`: `(x_t - x_tar) / t`.
pub fn target_velocity<T: Scalar>(x_tar: &Tensor<T>, x_t: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    check_time(t)?;
    if t <= T::lit(T_FLOOR) {
        return Err(Error::DegenerateTimestep {
            t: t.as_f64(),
            floor: T_FLOOR,
        });
    }
    x_t.zip_with(x_tar, "target_velocity", |x, tar| (x - tar) / t)
}

/// Strictly decreasing few-step timesteps starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct DiscreteSchedule {
    timesteps: Vec<f64>,
}

/// Config-file form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Explicit(Vec<f64>),
    Generated { steps: usize, spacing: Spacing },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
}

impl TryFrom<ScheduleSpec> for DiscreteSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        match spec {
            ScheduleSpec::Explicit(ts) => Self::new(ts),
            ScheduleSpec::Generated {
                steps,
                spacing: Spacing::Uniform,
            } => Self::uniform(steps),
        }
    }
}

impl From<DiscreteSchedule> for ScheduleSpec {
    fn from(s: DiscreteSchedule) -> Self {
        ScheduleSpec::Explicit(s.timesteps)
    }
}

impl DiscreteSchedule {
    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.first() != Some(&1.0) {
            return Err(Error::InvalidArgument("schedule must start at 1.0".into()));
        }
        if timesteps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument("schedule entries must lie in (0, 1]".into()));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("schedule must be strictly decreasing".into()));
        }
        Ok(Self { timesteps })
    }

    /// `[1, (n-1)/n, ..., 1/n]`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        Self::new((0..steps).map(|i| (steps - i) as f64 / steps as f64).collect())
    }

    /// The 4-step default `[1.0, 0.75, 0.5, 0.25]`.
    pub fn four_step() -> Self {
        Self::uniform(4).expect("valid")
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Index of `t` in the schedule (exact match).
    pub fn position(&self, t: f64) -> Option<usize> {
        self.timesteps.iter().position(|&s| s == t)
    }

    /// `(t_i, t_{i+1})` pairs, the final target being 0.
    fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(move |(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0.0)))
    }
}

/// A noisy batch at a shared time.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState<T> {
    pub x_t: Tensor<T>,
    pub t: T,
    pub labels: Vec<usize>,
}

/// Deterministic Euler integration along `schedule` down to `t = 0`.
pub fn ode_sample<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    z: &Tensor<T>,
    schedule: &DiscreteSchedule,
    labels: &[usize],
) -> Result<Tensor<T>> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty schedule".into()));
    }
    let mut x = z.clone();
    for (t, next) in schedule.steps() {
        let v = model.velocity(&x, T::lit(t), labels)?;
        let dt = T::lit(t - next);
        x = x.zip_with(&v, "ode step", |a, v| a - dt * v)?;
    }
    Ok(x)
}

thread_local! {
    static SDE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`sde_sample`] invocations on the current thread.
pub fn sde_call_count() -> u64 {
    SDE_CALLS.with(Cell::get)
}

/// Result of a stochastic rollout.
#[derive(Debug, Clone)]
pub struct SdeRollout<T> {
    /// State at each schedule time, before the step taken from it.
    pub trajectory: Vec<NoisyState<T>>,
    pub x0: Tensor<T>,
}

/// Euler–Maruyama analogue of [`ode_sample`]: every step adds
/// `noise_scale * sqrt(dt) * xi`. With `noise_scale == 0` no randomness is
/// drawn and the result is bit-identical to the ODE sampler.
pub fn sde_sample<T: Scalar, M: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z: &Tensor<T>,
    schedule: &DiscreteSchedule,
    labels: &[usize],
    noise_scale: f64,
    rng: &mut R,
) -> Result<SdeRollout<T>> {
    SDE_CALLS.with(|c| c.set(c.get() + 1));
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty schedule".into()));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_scale {noise_scale} < 0")));
    }
    let mut x = z.clone();
    let mut trajectory = Vec::with_capacity(schedule.len());
    for (t, next) in schedule.steps() {
        let v = model.velocity(&x, T::lit(t), labels)?;
        trajectory.push(NoisyState {
            x_t: x.clone(),
            t: T::lit(t),
            labels: labels.to_vec(),
        });
        let dt = T::lit(t - next);
        x = x.zip_with(&v, "sde step", |a, v| a - dt * v)?;
        if noise_scale > 0.0 {
            let sigma = T::lit(noise_scale * (t - next).sqrt());
            for v in x.data_mut() {
                *v = *v + sigma * T::lit(rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    Ok(SdeRollout { trajectory, x0: x })
}

/// Rolls `z` from `t = 1` down to the schedule time `t` with Euler steps.
///
/// The result is a plain tensor: nothing downstream can differentiate
/// through it.
pub fn back_sim<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    z: &Tensor<T>,
    t: f64,
    schedule: &DiscreteSchedule,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let stop = schedule
        .position(t)
        .ok_or_else(|| Error::InvalidArgument(format!("t={t} is not a schedule time")))?;
    let mut x = z.clone();
    for (t_i, next) in schedule.steps().take(stop) {
        let v = model.velocity(&x, T::lit(t_i), labels)?;
        let dt = T::lit(t_i - next);
        x = x.zip_with(&v, "back_sim step", |a, v| a - dt * v)?;
    }
    Ok(x)
}
