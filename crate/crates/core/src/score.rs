//! Analytic conditional noise-prediction models.
//!
//! The conditional Gaussian mixture has embedding-dependent means
//! `m_k(e) = A_k e + b_k`. Its noised marginal at timestep `t` is again a
//! mixture with means `alpha_t m_k(e)` and covariances
//! `alpha_t^2 Sigma_k + sigma_t^2 I`, so the score, the noise prediction and
//! the Jacobian with respect to `e` are all available in closed form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};
use crate::schedule::{NoisyState, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLabel {
    Positive,
    Negative,
    Unconditional,
}

/// A conditioning vector. The unconditional embedding is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub v: DVector<f64>,
    pub label: EmbeddingLabel,
}

impl Embedding {
    pub fn positive(v: DVector<f64>) -> Self {
        Self { v, label: EmbeddingLabel::Positive }
    }

    pub fn negative(v: DVector<f64>) -> Self {
        Self { v, label: EmbeddingLabel::Negative }
    }

    pub fn unconditional(dim: usize) -> Self {
        Self {
            v: DVector::zeros(dim),
            label: EmbeddingLabel::Unconditional,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// A conditional noise-prediction model `eps(x_t, e, t)` with an exact
/// Jacobian in the conditioning embedding.
pub trait ScoreModel: Send + Sync {
    fn data_dim(&self) -> usize;

    fn embed_dim(&self) -> usize;

    /// `grad_{x_t} log p(x_t | e)`.
    fn noisy_score(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<DVector<f64>>;

    /// `d eps / d e`, a `data_dim x embed_dim` matrix.
    fn eps_embedding_jacobian(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<DMatrix<f64>>;

    /// `eps = -sigma_t * score`.
    fn eps_predict(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<DVector<f64>> {
        Ok(self.noisy_score(state, e, schedule)? * -schedule.sigma(state.t))
    }
}

/// Classifier-free guidance with an arbitrary negative branch:
/// `eps(neg) + gamma * (eps(y) - eps(neg))`.
pub fn cfg_eps<M: ScoreModel + ?Sized>(
    model: &M,
    state: &NoisyState,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    if !(gamma >= 0.0) {
        return Err(PsdError::Parameter(format!("guidance scale must be >= 0, got {gamma}")));
    }
    let eps_y = model.eps_predict(state, y, schedule)?;
    let eps_neg = model.eps_predict(state, neg, schedule)?;
    Ok(guided(&eps_y, &eps_neg, gamma))
}

/// Combines already-evaluated branches exactly as [`cfg_eps`] does.
pub fn guided(eps_y: &DVector<f64>, eps_neg: &DVector<f64>, gamma: f64) -> DVector<f64> {
    eps_neg + (eps_y - eps_neg) * gamma
}

/// Serialized form: matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub weights: Vec<f64>,
    pub cond_maps: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GmmScoreModel {
    data_dim: usize,
    embed_dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    cond_maps: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

/// Per-component quantities of the noised marginal at one `(x_t, e, t)`.
struct ComponentEval {
    /// `C_k^{-1} (x_t - alpha m_k)`
    whitened: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_joint: f64,
}

impl GmmScoreModel {
    pub fn new(
        weights: Vec<f64>,
        cond_maps: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(PsdError::Parameter("mixture needs at least one component".into()));
        }
        if cond_maps.len() != k || offsets.len() != k || covariances.len() != k {
            return Err(PsdError::Parameter(format!(
                "component count mismatch: {k} weights, {} maps, {} offsets, {} covariances",
                cond_maps.len(),
                offsets.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(PsdError::Parameter("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PsdError::Parameter(format!("mixture weights sum to {total}, expected 1")));
        }
        let d = offsets[0].len();
        let de = cond_maps[0].ncols();
        if d == 0 {
            return Err(PsdError::Parameter("data dimension must be positive".into()));
        }
        for i in 0..k {
            if cond_maps[i].shape() != (d, de) {
                return Err(PsdError::Shape {
                    expected: format!("cond map {i} of shape {d}x{de}"),
                    found: format!("{:?}", cond_maps[i].shape()),
                });
            }
            check_len("offset", d, offsets[i].len())?;
            let cov = &covariances[i];
            if cov.shape() != (d, d) {
                return Err(PsdError::Shape {
                    expected: format!("covariance {i} of shape {d}x{d}"),
                    found: format!("{:?}", cov.shape()),
                });
            }
            if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                return Err(PsdError::Component { component: i, reason: "covariance is not symmetric".into() });
            }
            let smallest = cov.clone().symmetric_eigenvalues().min();
            if !(smallest > 1e-9) {
                return Err(PsdError::Component {
                    component: i,
                    reason: format!("covariance not positive definite (min eigenvalue {smallest:e})"),
                });
            }
            let finite = cond_maps[i].iter().chain(offsets[i].iter()).chain(cov.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(PsdError::Component { component: i, reason: "non-finite parameter".into() });
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { data_dim: d, embed_dim: de, weights, log_weights, cond_maps, offsets, covariances })
    }

    /// A single Gaussian `N(A e + b, Sigma)`.
    pub fn single(cond_map: DMatrix<f64>, offset: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![cond_map], vec![offset], vec![covariance])
    }

    /// Random well-conditioned mixture for tests and gradient checks.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, components: usize, data_dim: usize, embed_dim: usize) -> Result<Self> {
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let raw: Vec<f64> = (0..components).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let cond_maps = (0..components)
            .map(|_| DMatrix::from_fn(data_dim, embed_dim, |_, _| 0.7 * normal(rng)))
            .collect();
        let offsets = (0..components)
            .map(|_| DVector::from_fn(data_dim, |_, _| 1.5 * normal(rng)))
            .collect();
        let covariances = (0..components)
            .map(|_| {
                let l = DMatrix::from_fn(data_dim, data_dim, |_, _| 0.4 * normal(rng));
                &l * l.transpose() + DMatrix::identity(data_dim, data_dim) * 0.3
            })
            .collect();
        Self::new(weights, cond_maps, offsets, covariances)
    }

    pub fn from_params(p: &GmmParams) -> Result<Self> {
        let (d, de) = (p.data_dim, p.embed_dim);
        let k = p.weights.len();
        if p.cond_maps.len() != k || p.offsets.len() != k || p.covariances.len() != k {
            return Err(PsdError::Parameter("component lists have different lengths".into()));
        }
        let mut maps = Vec::with_capacity(k);
        let mut offsets = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for i in 0..k {
            check_len("row-major cond map", d * de, p.cond_maps[i].len())?;
            check_len("offset", d, p.offsets[i].len())?;
            check_len("row-major covariance", d * d, p.covariances[i].len())?;
            maps.push(DMatrix::from_row_slice(d, de, &p.cond_maps[i]));
            offsets.push(DVector::from_column_slice(&p.offsets[i]));
            covs.push(DMatrix::from_row_slice(d, d, &p.covariances[i]));
        }
        Self::new(p.weights.clone(), maps, offsets, covs)
    }

    pub fn to_params(&self) -> GmmParams {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        GmmParams {
            data_dim: self.data_dim,
            embed_dim: self.embed_dim,
            weights: self.weights.clone(),
            cond_maps: self.cond_maps.iter().map(row_major).collect(),
            offsets: self.offsets.iter().map(|o| o.as_slice().to_vec()).collect(),
            covariances: self.covariances.iter().map(row_major).collect(),
        }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cond_maps(&self) -> &[DMatrix<f64>] {
        &self.cond_maps
    }

    pub fn offsets(&self) -> &[DVector<f64>] {
        &self.offsets
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Component mean `A_k e + b_k`.
    pub fn component_mean(&self, k: usize, e: &Embedding) -> DVector<f64> {
        &self.cond_maps[k] * &e.v + &self.offsets[k]
    }

    /// Mixture mean `sum_k w_k m_k(e)` of the clean conditional distribution.
    pub fn mean(&self, e: &Embedding) -> DVector<f64> {
        (0..self.num_components())
            .map(|k| self.component_mean(k, e) * self.weights[k])
            .fold(DVector::zeros(self.data_dim), |acc, m| acc + m)
    }

    fn check_inputs(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<()> {
        check_len("state", self.data_dim, state.x.len())?;
        check_len("embedding", self.embed_dim, e.dim())?;
        schedule.check_timestep(state.t)?;
        if !state.x.iter().all(|v| v.is_finite()) {
            return Err(PsdError::Numerical("non-finite noisy sample".into()));
        }
        Ok(())
    }

    fn components(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<Vec<ComponentEval>> {
        self.check_inputs(state, e, schedule)?;
        let alpha = schedule.alpha(state.t);
        let sigma = schedule.sigma(state.t);
        let d = self.data_dim;
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.num_components())
            .map(|k| {
                let cov = &self.covariances[k] * (alpha * alpha) + DMatrix::identity(d, d) * (sigma * sigma);
                let chol = Cholesky::new(cov).ok_or_else(|| PsdError::Component {
                    component: k,
                    reason: "noised covariance is not positive definite".into(),
                })?;
                let resid = &state.x - self.component_mean(k, e) * alpha;
                let whitened = chol.solve(&resid);
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let log_joint = self.log_weights[k] - 0.5 * (resid.dot(&whitened) + log_det + d as f64 * log_2pi);
                if !log_joint.is_finite() {
                    return Err(PsdError::Component { component: k, reason: "non-finite log density".into() });
                }
                Ok(ComponentEval { whitened, chol, log_joint })
            })
            .collect()
    }

    fn responsibilities(comps: &[ComponentEval]) -> (Vec<f64>, f64) {
        let max = comps.iter().map(|c| c.log_joint).fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = comps.iter().map(|c| (c.log_joint - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        (unnorm.iter().map(|u| u / total).collect(), max + total.ln())
    }

    /// `log p(x_t | e)` of the noised marginal.
    pub fn log_density(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<f64> {
        let comps = self.components(state, e, schedule)?;
        Ok(Self::responsibilities(&comps).1)
    }
}

impl ScoreModel for GmmScoreModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn noisy_score(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<DVector<f64>> {
        let comps = self.components(state, e, schedule)?;
        let (resp, _) = Self::responsibilities(&comps);
        let mut score = DVector::zeros(self.data_dim);
        for (c, r) in comps.iter().zip(&resp) {
            score.axpy(-r, &c.whitened, 1.0);
        }
        Ok(score)
    }

    fn eps_embedding_jacobian(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> Result<DMatrix<f64>> {
        let comps = self.components(state, e, schedule)?;
        let (resp, _) = Self::responsibilities(&comps);
        let alpha = schedule.alpha(state.t);
        let sigma = schedule.sigma(state.t);

        // d log N_k / d e = alpha A_k^T u_k, with u_k the whitened residual.
        let grads: Vec<DVector<f64>> = comps
            .iter()
            .enumerate()
            .map(|(k, c)| self.cond_maps[k].tr_mul(&c.whitened) * alpha)
            .collect();
        let mean_grad = grads
            .iter()
            .zip(&resp)
            .fold(DVector::zeros(self.embed_dim), |acc, (g, r)| acc + g * *r);

        // score = -sum_k r_k u_k, and d u_k / d e = -alpha C_k^{-1} A_k.
        let mut dscore = DMatrix::zeros(self.data_dim, self.embed_dim);
        for (k, c) in comps.iter().enumerate() {
            let r = resp[k];
            let dresp = (&grads[k] - &mean_grad) * r;
            dscore -= &c.whitened * dresp.transpose();
            dscore += c.chol.solve(&self.cond_maps[k]) * (r * alpha);
        }
        Ok(dscore * -sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> Schedule {
        Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2).unwrap()
    }

    fn standard_normal(d: usize, de: usize) -> GmmScoreModel {
        GmmScoreModel::single(DMatrix::zeros(d, de), DVector::zeros(d), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let s = schedule();
        let m = standard_normal(3, 2);
        let e = Embedding::unconditional(2);
        for t in [0, 1, 300, 1000] {
            let x = DVector::from_vec(vec![0.3, -1.2, 2.5]);
            let st = NoisyState::new(x.clone(), t);
            let score = m.noisy_score(&st, &e, &s).unwrap();
            assert!((score + &x).amax() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn eps_examples() {
        let s = Schedule::from_tables(ScheduleKind::VariancePreserving, vec![1.0, 0.8], vec![0.0, 0.6]).unwrap();
        let m = standard_normal(1, 1);
        let e = Embedding::unconditional(1);
        let eps = m.eps_predict(&NoisyState::new(DVector::from_vec(vec![1.0]), 1), &e, &s).unwrap();
        assert!((eps[0] - 0.6).abs() < 1e-15);
        let at_zero = m.eps_predict(&NoisyState::new(DVector::from_vec(vec![1.0]), 0), &e, &s).unwrap();
        assert_eq!(at_zero[0], 0.0);
    }

    #[test]
    fn eps_is_scaled_score_for_random_mixture() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = GmmScoreModel::random(&mut rng, 3, 2, 2).unwrap();
        let e = Embedding::positive(DVector::from_vec(vec![0.4, -0.2]));
        let st = NoisyState::new(DVector::from_vec(vec![0.5, 1.0]), 420);
        let eps = m.eps_predict(&st, &e, &s).unwrap();
        let score = m.noisy_score(&st, &e, &s).unwrap();
        let diff = &eps + score * s.sigma(420);
        assert!(diff.amax() <= 1e-12 * eps.amax().max(1.0));
    }

    #[test]
    fn zero_cond_maps_give_zero_jacobian() {
        let s = schedule();
        let m = GmmScoreModel::new(
            vec![0.4, 0.6],
            vec![DMatrix::zeros(2, 3), DMatrix::zeros(2, 3)],
            vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 0.5])],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5],
        )
        .unwrap();
        let e = Embedding::positive(DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let j = m
            .eps_embedding_jacobian(&NoisyState::new(DVector::from_vec(vec![0.2, 0.1]), 500), &e, &s)
            .unwrap();
        assert_eq!(j, DMatrix::zeros(2, 3));
    }

    #[test]
    fn cfg_examples() {
        let eps_neg = DVector::from_vec(vec![1.0, 0.0]);
        let eps_y = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(guided(&eps_y, &eps_neg, 2.0), DVector::from_vec(vec![-1.0, 2.0]));
        assert_eq!(guided(&eps_y, &eps_neg, 0.0), eps_neg);
        assert_eq!(guided(&eps_y, &eps_neg, 1.0), eps_y);
    }

    #[test]
    fn rejects_invalid_models() {
        let bad_weights = GmmScoreModel::new(
            vec![0.5, 0.6],
            vec![DMatrix::zeros(1, 1); 2],
            vec![DVector::zeros(1); 2],
            vec![DMatrix::identity(1, 1); 2],
        );
        assert!(bad_weights.is_err());
        let not_spd = GmmScoreModel::single(DMatrix::zeros(2, 1), DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(not_spd, Err(PsdError::Component { component: 0, .. })));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = GmmScoreModel::random(&mut rng, 2, 3, 2).unwrap();
        let back = GmmScoreModel::from_params(&m.to_params()).unwrap();
        assert_eq!(back.to_params(), m.to_params());
        assert_eq!(back.cond_maps()[1], m.cond_maps()[1]);
    }
}
