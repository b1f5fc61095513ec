//! Differentiable analytic rewards and the Bradley-Terry preference model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};
use crate::score::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `-s * |x - mu|^2`
    Quadratic,
    /// `s * exp(-|x - mu|^2 / (2 h^2))`
    Rbf,
    /// `s` everywhere; a zero-gradient control.
    Constant,
}

/// A reward whose optimum `mu(y) = M y + m0` depends on the prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    kind: RewardKind,
    target_map: DMatrix<f64>,
    offset: DVector<f64>,
    scale: f64,
    bandwidth: f64,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, target_map: DMatrix<f64>, offset: DVector<f64>, scale: f64, bandwidth: f64) -> Result<Self> {
        check_len("reward offset", target_map.nrows(), offset.len())?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(PsdError::Parameter(format!("reward scale must be positive, got {scale}")));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(PsdError::Parameter(format!("reward bandwidth must be positive, got {bandwidth}")));
        }
        if !target_map.iter().chain(offset.iter()).all(|v| v.is_finite()) {
            return Err(PsdError::Parameter("non-finite reward parameters".into()));
        }
        Ok(Self { kind, target_map, offset, scale, bandwidth })
    }

    pub fn quadratic(target_map: DMatrix<f64>, offset: DVector<f64>, scale: f64) -> Result<Self> {
        Self::new(RewardKind::Quadratic, target_map, offset, scale, 1.0)
    }

    pub fn rbf(target_map: DMatrix<f64>, offset: DVector<f64>, scale: f64, bandwidth: f64) -> Result<Self> {
        Self::new(RewardKind::Rbf, target_map, offset, scale, bandwidth)
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn target_map(&self) -> &DMatrix<f64> {
        &self.target_map
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn data_dim(&self) -> usize {
        self.target_map.nrows()
    }

    /// The reward maximizer `mu(y)`.
    pub fn target(&self, y: &Embedding) -> Result<DVector<f64>> {
        check_len("embedding", self.target_map.ncols(), y.dim())?;
        Ok(&self.target_map * &y.v + &self.offset)
    }

    fn residual(&self, y: &Embedding, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("sample", self.data_dim(), x.len())?;
        Ok(x - self.target(y)?)
    }

    pub fn reward(&self, y: &Embedding, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(y, x)?;
        let sq = r.norm_squared();
        Ok(match self.kind {
            RewardKind::Quadratic => -self.scale * sq,
            RewardKind::Rbf => self.scale * (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp(),
            RewardKind::Constant => self.scale,
        })
    }

    pub fn reward_gradient(&self, y: &Embedding, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(y, x)?;
        Ok(match self.kind {
            RewardKind::Quadratic => r * (-2.0 * self.scale),
            RewardKind::Rbf => {
                let h2 = self.bandwidth * self.bandwidth;
                let value = self.scale * (-r.norm_squared() / (2.0 * h2)).exp();
                r * (-value / h2)
            }
            RewardKind::Constant => DVector::zeros(r.len()),
        })
    }

    /// Rank two one-step predictions by reward.
    pub fn rank_pair(&self, y: &Embedding, x0_a: &DVector<f64>, x0_b: &DVector<f64>) -> Result<PreferenceOutcome> {
        Ok(bt_probability(self.reward(y, x0_a)?, self.reward(y, x0_b)?))
    }
}

/// Logistic sigmoid, evaluated without overflow for either sign.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry probability that the first sample is preferred.
pub fn preference_probability(r_first: f64, r_second: f64) -> f64 {
    sigmoid(r_first - r_second)
}

/// Outcome of ranking a pair. `delta_r >= 0` and `p_win >= 0.5` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceOutcome {
    /// Index (0 or 1) of the higher-reward sample; ties go to 0.
    pub winner_index: usize,
    pub r_win: f64,
    pub r_lose: f64,
    pub delta_r: f64,
    pub p_win: f64,
}

impl PreferenceOutcome {
    /// `sigma(-delta_r)`, the weight given to the preference term.
    pub fn misranking_weight(&self) -> f64 {
        sigmoid(-self.delta_r)
    }
}

/// Orders the two rewards and evaluates the Bradley-Terry model on the
/// winner/loser pair.
pub fn bt_probability(r_a: f64, r_b: f64) -> PreferenceOutcome {
    let (winner_index, r_win, r_lose) = if r_b > r_a { (1, r_b, r_a) } else { (0, r_a, r_b) };
    let delta_r = r_win - r_lose;
    PreferenceOutcome { winner_index, r_win, r_lose, delta_r, p_win: sigmoid(delta_r) }
}
