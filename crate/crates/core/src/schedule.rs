//! Discrete noise schedules, forward noising and the deterministic DDIM update.
//!
//! Index 0 is clean data (`alpha = 1`, `sigma = 0`) and index `T` is the
//! noisiest level. Every other module reads `(alpha_t, sigma_t)` from here.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VariancePreserving,
}

/// Tabulated `(alpha_t, sigma_t)` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    /// Linear-beta variance-preserving schedule:
    /// `alpha_t = prod_{s<=t} sqrt(1 - beta_s)`, `sigma_t = sqrt(1 - alpha_t^2)`.
    pub fn build(kind: ScheduleKind, num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(PsdError::Parameter(format!(
                "num_steps must be at least 2, got {num_steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(PsdError::Parameter(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha = Vec::with_capacity(num_steps + 1);
        let mut sigma = Vec::with_capacity(num_steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut acc = 1.0_f64;
        for s in 1..=num_steps {
            let frac = (s - 1) as f64 / (num_steps - 1) as f64;
            let beta = beta_min + (beta_max - beta_min) * frac;
            acc *= (1.0 - beta).sqrt();
            alpha.push(acc);
            sigma.push((1.0 - acc * acc).sqrt());
        }
        Self::from_tables(kind, alpha, sigma)
    }

    /// Builds a schedule from explicit tables, checking every invariant.
    pub fn from_tables(kind: ScheduleKind, alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 || alpha.len() != sigma.len() {
            return Err(PsdError::Parameter(format!(
                "alpha/sigma tables must share a length of at least 2 (got {} and {})",
                alpha.len(),
                sigma.len()
            )));
        }
        if alpha[0] != 1.0 || sigma[0] != 0.0 {
            return Err(PsdError::Parameter("index 0 must be clean (alpha=1, sigma=0)".into()));
        }
        for t in 1..alpha.len() {
            let (a, s) = (alpha[t], sigma[t]);
            if !(a > 0.0 && a <= 1.0 && (0.0..1.0).contains(&s)) {
                return Err(PsdError::Parameter(format!(
                    "coefficients out of range at t={t}: alpha={a}, sigma={s}"
                )));
            }
            if !(a < alpha[t - 1] && s > sigma[t - 1]) {
                return Err(PsdError::Parameter(format!(
                    "alpha must strictly decrease and sigma strictly increase (t={t})"
                )));
            }
            if kind == ScheduleKind::VariancePreserving && (a * a + s * s - 1.0).abs() > 1e-12 {
                return Err(PsdError::Parameter(format!(
                    "variance-preserving identity violated at t={t}"
                )));
            }
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Largest timestep index `T`.
    pub fn num_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            Err(PsdError::Range(format!(
                "timestep {t} outside [0, {}]",
                self.num_steps()
            )))
        } else {
            Ok(())
        }
    }
}

/// A sample `x_t` at timestep index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub x: DVector<f64>,
    pub t: usize,
}

impl NoisyState {
    pub fn new(x: DVector<f64>, t: usize) -> Self {
        Self { x, t }
    }
}

/// Forward noising `x_t = alpha_t x0 + sigma_t eps`.
pub fn add_noise(x0: &DVector<f64>, t: usize, eps: &DVector<f64>, schedule: &Schedule) -> Result<NoisyState> {
    check_len("noise", x0.len(), eps.len())?;
    schedule.check_timestep(t)?;
    let x = x0 * schedule.alpha(t) + eps * schedule.sigma(t);
    Ok(NoisyState { x, t })
}

/// One-step clean prediction `(x_t - sigma_t eps_hat) / alpha_t`.
pub fn tweedie_predict(state: &NoisyState, eps_hat: &DVector<f64>, schedule: &Schedule) -> Result<DVector<f64>> {
    check_len("noise prediction", state.x.len(), eps_hat.len())?;
    schedule.check_timestep(state.t)?;
    let alpha = schedule.alpha(state.t);
    if alpha == 0.0 {
        return Err(PsdError::SingularSchedule(state.t));
    }
    Ok((&state.x - eps_hat * schedule.sigma(state.t)) / alpha)
}

/// Deterministic (eta = 0) DDIM update from `state.t` to `t_next`.
///
/// `t_next == state.t` is the fixed point of the update and returns the
/// state unchanged; moving to a noisier timestep is an ordering error.
pub fn ddim_step(state: &NoisyState, eps_hat: &DVector<f64>, t_next: usize, schedule: &Schedule) -> Result<NoisyState> {
    if t_next > state.t {
        return Err(PsdError::Ordering {
            current: state.t,
            next: t_next,
        });
    }
    if t_next == state.t {
        check_len("noise prediction", state.x.len(), eps_hat.len())?;
        return Ok(state.clone());
    }
    let x0_hat = tweedie_predict(state, eps_hat, schedule)?;
    let x = &x0_hat * schedule.alpha(t_next) + eps_hat * schedule.sigma(t_next);
    Ok(NoisyState { x, t: t_next })
}

/// `count` timesteps spaced evenly from `T` down to 0 (both ends included).
pub fn ddim_timesteps(schedule: &Schedule, count: usize) -> Vec<usize> {
    let total = schedule.num_steps();
    if count == 0 {
        return vec![total, 0];
    }
    let mut steps: Vec<usize> = (0..=count)
        .map(|i| ((total as f64) * (1.0 - i as f64 / count as f64)).round() as usize)
        .collect();
    steps.dedup();
    steps
}
