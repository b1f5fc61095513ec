//! Reference computations for cross-checking the main paths.
//!
//! Nothing in here calls the score, guidance or reward evaluation code: the
//! mixture marginal, guided predictions and rewards are rebuilt from the raw
//! parameters with LU factorizations and plain loops.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::rewards::{PreferenceOutcome, RewardKind, RewardSpec};
use crate::schedule::Schedule;
use crate::score::{Embedding, GmmScoreModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffSpec {
    pub step: f64,
    pub scheme: FdScheme,
    pub rel_tol: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self { step: 1e-4, scheme: FdScheme::Central, rel_tol: 1e-5 }
    }
}

impl FiniteDiffSpec {
    fn check(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.rel_tol > 0.0) {
            return Err(PsdError::Parameter(format!("finite-difference step and tolerance must be positive: {self:?}")));
        }
        Ok(())
    }

    fn step_for(&self, xi: f64) -> f64 {
        xi.abs().max(1.0) * self.step
    }
}

/// Central-difference gradient of a scalar field.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, spec: &FiniteDiffSpec) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    spec.check()?;
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = spec.step_for(x[i]);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(PsdError::Oracle(format!("non-finite function value probing coordinate {i}")));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector field; column `j` is `d f / d x_j`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, spec: &FiniteDiffSpec) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    spec.check()?;
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = spec.step_for(x[j]);
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        if !up.iter().chain(down.iter()).all(|v| v.is_finite()) {
            return Err(PsdError::Oracle(format!("non-finite function value probing coordinate {j}")));
        }
        cols.push((up - down) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(f(x).len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// `|a - b| / max(|b|, floor)` in the Frobenius norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

struct Branch {
    log_joint: f64,
    /// `C^{-1} (x - alpha m)`
    u: DVector<f64>,
}

fn branches(model: &GmmScoreModel, x: &DVector<f64>, e: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<Vec<Branch>> {
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    let d = x.len();
    let mut out = Vec::with_capacity(model.num_components());
    for k in 0..model.num_components() {
        let mut mean = model.offsets()[k].clone();
        let map = &model.cond_maps()[k];
        for i in 0..d {
            for j in 0..e.len() {
                mean[i] += map[(i, j)] * e[j];
            }
        }
        let mut cov = &model.covariances()[k] * (a * a);
        for i in 0..d {
            cov[(i, i)] += s * s;
        }
        let lu = cov.lu();
        let det = lu.determinant();
        if !(det > 0.0) {
            return Err(PsdError::Oracle(format!("component {k} covariance has determinant {det}")));
        }
        let r = x - mean * a;
        let u = lu.solve(&r).ok_or_else(|| PsdError::Oracle(format!("component {k} covariance is singular")))?;
        let quad = r.dot(&u);
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln());
        out.push(Branch { log_joint: model.weights()[k].ln() + log_norm - 0.5 * quad, u });
    }
    Ok(out)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log p_t(x | e)` of the noised mixture.
pub fn gmm_log_density(model: &GmmScoreModel, x: &DVector<f64>, e: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<f64> {
    let b = branches(model, x, e, t, schedule)?;
    let logs: Vec<f64> = b.iter().map(|b| b.log_joint).collect();
    Ok(log_sum_exp(&logs))
}

/// `grad_x log p_t(x | e)`.
pub fn gmm_score(model: &GmmScoreModel, x: &DVector<f64>, e: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>> {
    let b = branches(model, x, e, t, schedule)?;
    let logs: Vec<f64> = b.iter().map(|b| b.log_joint).collect();
    let z = log_sum_exp(&logs);
    let mut score = DVector::zeros(x.len());
    for br in &b {
        score -= &br.u * (br.log_joint - z).exp();
    }
    Ok(score)
}

/// `eps(x_t, e, t) = -sigma_t * score`.
pub fn gmm_eps(model: &GmmScoreModel, x: &DVector<f64>, e: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<DVector<f64>> {
    Ok(gmm_score(model, x, e, t, schedule)? * -schedule.sigma(t))
}

/// Guided prediction rebuilt from [`gmm_eps`].
pub fn gmm_cfg_eps(
    model: &GmmScoreModel,
    x: &DVector<f64>,
    y: &DVector<f64>,
    neg: &DVector<f64>,
    gamma: f64,
    t: usize,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    let ey = gmm_eps(model, x, y, t, schedule)?;
    let en = gmm_eps(model, x, neg, t, schedule)?;
    Ok(&ey * gamma + &en * (1.0 - gamma))
}

/// Reward value recomputed from the spec's parameters.
pub fn reward_value(spec: &RewardSpec, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let mu = spec.target_map() * y + spec.offset();
    let sq: f64 = x.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    match spec.kind() {
        RewardKind::Quadratic => -spec.scale() * sq,
        RewardKind::Rbf => spec.scale() * (-sq / (2.0 * spec.bandwidth().powi(2))).exp(),
        RewardKind::Constant => spec.scale(),
    }
}

/// Exact `E[x0 | x_t]` under the prior `N(mu, cov)`.
pub fn gaussian_posterior_mean(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    x_t: &DVector<f64>,
    schedule: &Schedule,
    t: usize,
) -> Result<DVector<f64>> {
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    let d = mu.len();
    let marginal = cov * (a * a) + DMatrix::identity(d, d) * (s * s);
    let solved = marginal
        .lu()
        .solve(&(x_t - mu * a))
        .ok_or_else(|| PsdError::Numerical("singular marginal covariance".into()))?;
    Ok(mu + cov * solved * a)
}

/// Re-derives the ranking of the two branches `x_c` noised with `eps_a`
/// and `eps_b`.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_pair_outcome(
    x_c: &DVector<f64>,
    t: usize,
    eps_a: &DVector<f64>,
    eps_b: &DVector<f64>,
    model: &GmmScoreModel,
    reward: &RewardSpec,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<PreferenceOutcome> {
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    let mut r = [0.0; 2];
    for (slot, eps) in [eps_a, eps_b].into_iter().enumerate() {
        let x_t = x_c * a + eps * s;
        let e = gmm_cfg_eps(model, &x_t, &y.v, &neg.v, gamma, t, schedule)?;
        let x0 = (x_t - e * s) / a;
        r[slot] = reward_value(reward, &y.v, &x0);
    }
    let winner_index = if r[1] > r[0] { 1 } else { 0 };
    let (r_win, r_lose) = (r[winner_index], r[1 - winner_index]);
    let delta_r = r_win - r_lose;
    Ok(PreferenceOutcome { winner_index, r_win, r_lose, delta_r, p_win: 1.0 / (1.0 + (-delta_r).exp()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn toy() -> Schedule {
        Schedule::from_tables(ScheduleKind::VariancePreserving, vec![1.0, 0.8], vec![0.0, 0.6]).unwrap()
    }

    #[test]
    fn fd_on_quadratic_is_exact() {
        let g = fd_gradient(|x| x.norm_squared(), &DVector::from_vec(vec![1.0, 2.0]), &FiniteDiffSpec::default()).unwrap();
        assert!((g - DVector::from_vec(vec![2.0, 4.0])).amax() < 1e-8);
    }

    #[test]
    fn fd_on_constant_is_zero() {
        let g = fd_gradient(|_| 3.25, &DVector::from_vec(vec![-4.0, 0.1, 9.0]), &FiniteDiffSpec::default()).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn fd_rejects_non_finite() {
        let r = fd_gradient(|x| 1.0 / x[0].signum().min(0.0), &DVector::from_vec(vec![1.0]), &FiniteDiffSpec::default());
        assert!(matches!(r, Err(PsdError::Oracle(_))));
        let bad = FiniteDiffSpec { step: 0.0, ..Default::default() };
        assert!(fd_gradient(|x| x[0], &DVector::zeros(1), &bad).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let s = toy();
        let m = gaussian_posterior_mean(&DVector::zeros(1), &DMatrix::identity(1, 1), &DVector::from_vec(vec![1.0]), &s, 1).unwrap();
        assert!((m[0] - 0.8).abs() < 1e-15);
        let x = DVector::from_vec(vec![0.4, -1.2]);
        let clean = gaussian_posterior_mean(&DVector::zeros(2), &DMatrix::identity(2, 2), &x, &s, 0).unwrap();
        assert!((clean - &x).amax() < 1e-15);
        let mu = DVector::from_vec(vec![2.0, -1.0]);
        let point = gaussian_posterior_mean(&mu, &(DMatrix::identity(2, 2) * 1e-14), &x, &s, 1).unwrap();
        assert!((point - mu).amax() < 1e-12);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[1e-9], &[0.0], 1.0), 1e-9);
        assert!((relative_error(&[1.1], &[1.0], 1e-12) - 0.1).abs() < 1e-12);
    }
}
