//! Checks of the optimal-negative-embedding condition and of the direction
//! the preference term moves samples in.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::guidance::{GuidanceTerms, WinLosePair};
use crate::rewards::RewardSpec;
use crate::schedule::{NoisyState, Schedule};
use crate::score::{Embedding, ScoreModel};
use crate::stats::{mean, std_error, wilson_interval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub name: String,
    pub scalar_metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
}

impl DiagnosticReport {
    fn new(name: &str, metrics: Vec<(&str, f64)>) -> Result<Self> {
        let mut scalar_metrics = BTreeMap::new();
        for (k, v) in metrics {
            if !v.is_finite() {
                return Err(PsdError::Numerical(format!("diagnostic {name}: metric {k} is {v}")));
            }
            scalar_metrics.insert(k.to_string(), v);
        }
        Ok(Self { name: name.to_string(), scalar_metrics, pass: None })
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.scalar_metrics.get(key).copied()
    }

    /// Declares `metric >= min` as this report's pass condition.
    pub fn with_min_threshold(mut self, key: &str, min: f64) -> Self {
        self.pass = Some(self.metric(key).is_some_and(|v| v >= min));
        self
    }

    /// Declares `metric <= max` as this report's pass condition.
    pub fn with_max_threshold(mut self, key: &str, max: f64) -> Self {
        self.pass = Some(self.metric(key).is_some_and(|v| v <= max));
        self
    }
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom > 0.0 {
        a.dot(b) / denom
    } else {
        0.0
    }
}

/// Residual of `eps(x_t, n) = eps(x_t, y) + (sigma_t beta / gamma) grad r(x_t)`
/// over the probe states, plus the alignment between `eps(n) - eps(y)` and
/// `grad r`.
#[allow(clippy::too_many_arguments)]
pub fn check_optimal_negative_condition<M: ScoreModel + ?Sized>(
    model: &M,
    trained_neg: &Embedding,
    y: &Embedding,
    gamma: f64,
    beta: f64,
    reward: &RewardSpec,
    schedule: &Schedule,
    probe_states: &[NoisyState],
) -> Result<DiagnosticReport> {
    if probe_states.is_empty() {
        return Err(PsdError::Parameter("no probe states".into()));
    }
    let coef = |t: usize| if gamma.is_infinite() { 0.0 } else { schedule.sigma(t) * beta / gamma };
    if !(gamma > 0.0) {
        return Err(PsdError::Parameter(format!("condition needs gamma > 0, got {gamma}")));
    }
    let mut residuals = Vec::with_capacity(probe_states.len());
    let mut gaps = Vec::with_capacity(probe_states.len());
    let mut cosines = Vec::with_capacity(probe_states.len());
    for state in probe_states {
        let eps_n = model.eps_predict(state, trained_neg, schedule)?;
        let eps_y = model.eps_predict(state, y, schedule)?;
        let grad_r = reward.reward_gradient(y, &state.x)?;
        let target = &eps_y + &grad_r * coef(state.t);
        residuals.push((&eps_n - target).norm());
        let gap = eps_n - eps_y;
        gaps.push(gap.norm());
        cosines.push(cosine(&gap, &grad_r));
    }
    DiagnosticReport::new(
        "optimal_negative_condition",
        vec![
            ("mean_residual_norm", mean(&residuals)),
            ("max_residual_norm", residuals.iter().cloned().fold(0.0, f64::max)),
            ("mean_branch_gap_norm", mean(&gaps)),
            ("mean_cosine", mean(&cosines)),
            ("probes", probe_states.len() as f64),
        ],
    )
}

/// `<-delta_pref, grad r(x0hat_win)>` for one pair.
pub fn guidance_inner_product(pair: &WinLosePair, terms: &GuidanceTerms, reward: &RewardSpec, y: &Embedding) -> Result<f64> {
    let grad_r = reward.reward_gradient(y, &pair.x0hat_win)?;
    Ok(-terms.delta_pref.dot(&grad_r))
}

/// Aggregates [`guidance_inner_product`] over a batch of pairs.
pub fn check_guidance_direction(
    batch: &[(WinLosePair, GuidanceTerms)],
    reward: &RewardSpec,
    y: &Embedding,
    _schedule: &Schedule,
) -> Result<DiagnosticReport> {
    if batch.is_empty() {
        return Err(PsdError::Parameter("no pairs to aggregate".into()));
    }
    let mut inner = Vec::with_capacity(batch.len());
    let mut cosines = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (pair, terms) in batch {
        inner.push(guidance_inner_product(pair, terms, reward, y)?);
        let grad_r = reward.reward_gradient(y, &pair.x0hat_win)?;
        cosines.push(cosine(&-&terms.delta_pref, &grad_r));
        weights.push(terms.pref_weight);
    }
    let positive = inner.iter().filter(|v| **v > 0.0).count();
    let (lo, hi) = wilson_interval(positive, inner.len(), 1.959963984540054);
    DiagnosticReport::new(
        "guidance_direction",
        vec![
            ("pairs", inner.len() as f64),
            ("mean_inner_product", mean(&inner)),
            ("stderr_inner_product", std_error(&inner)),
            ("mean_cosine", mean(&cosines)),
            ("fraction_positive", positive as f64 / inner.len() as f64),
            ("fraction_positive_ci_lo", lo),
            ("fraction_positive_ci_hi", hi),
            ("mean_pref_weight", mean(&weights)),
        ],
    )
}
