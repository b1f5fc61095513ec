//! Win/lose pair construction and the three guidance terms.
//!
//! A pair is two noisings of the same clean render. Both branches are
//! denoised in one step with the guided prediction, ranked by reward, and
//! the winner supplies `delta_gen` and `delta_cls`. The difference of the
//! guided predictions at the two branches is the preference term, scaled by
//!
//! ```text
//! beta_r = gamma * |delta_cls| / |delta_pref| * sigmoid(-delta_r)
//! ```
//!
//! so that it never outweighs the classifier-free term and fades once the
//! pair is already ranked confidently.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};
use crate::rewards::{PreferenceOutcome, RewardSpec};
use crate::schedule::{add_noise, tweedie_predict, NoisyState, Schedule};
use crate::score::{cfg_eps, Embedding, ScoreModel};
use crate::streams::{standard_normal, RunStreams};

/// How the two noises of a pair are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoisingStrategy {
    /// Two independent standard normal draws.
    Independent,
    /// The first noise is the conditional prediction `eps(x_s, y, s)` at a
    /// noisier timestep `s = t + tau`, with `tau` uniform on
    /// `[tau_min, tau_max]` and `x_s` built from the second noise.
    InversionPredicted { tau_min: usize, tau_max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinLosePair {
    pub x_c: DVector<f64>,
    pub t: usize,
    pub x_t_win: DVector<f64>,
    pub x_t_lose: DVector<f64>,
    pub eps_win: DVector<f64>,
    pub eps_lose: DVector<f64>,
    pub x0hat_win: DVector<f64>,
    pub x0hat_lose: DVector<f64>,
    pub outcome: PreferenceOutcome,
    /// Time shift used by inversion-predicted noising.
    pub tau: Option<usize>,
}

impl WinLosePair {
    pub fn win_state(&self) -> NoisyState {
        NoisyState::new(self.x_t_win.clone(), self.t)
    }

    pub fn lose_state(&self) -> NoisyState {
        NoisyState::new(self.x_t_lose.clone(), self.t)
    }

    /// The same pair with the roles of the two branches exchanged.
    pub fn swapped(&self) -> Self {
        let mut outcome = self.outcome;
        outcome.winner_index = 1 - outcome.winner_index;
        std::mem::swap(&mut outcome.r_win, &mut outcome.r_lose);
        Self {
            x_c: self.x_c.clone(),
            t: self.t,
            x_t_win: self.x_t_lose.clone(),
            x_t_lose: self.x_t_win.clone(),
            eps_win: self.eps_lose.clone(),
            eps_lose: self.eps_win.clone(),
            x0hat_win: self.x0hat_lose.clone(),
            x0hat_lose: self.x0hat_win.clone(),
            outcome,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerms {
    pub delta_gen: DVector<f64>,
    pub delta_cls: DVector<f64>,
    pub delta_pref: DVector<f64>,
    pub beta_r: f64,
    /// `sigmoid(-delta_r)` of the pair the terms were built from.
    pub pref_weight: f64,
}

impl GuidanceTerms {
    /// Drops the preference term (`beta_r = 0`).
    pub fn without_preference(mut self) -> Self {
        self.beta_r = 0.0;
        self
    }
}

/// One-step clean prediction with the guided noise estimate.
pub fn guided_one_step<M: ScoreModel + ?Sized>(
    model: &M,
    state: &NoisyState,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    let eps = cfg_eps(model, state, y, neg, gamma, schedule)?;
    tweedie_predict(state, &eps, schedule)
}

/// Builds and ranks a pair from two given noises.
#[allow(clippy::too_many_arguments)]
pub fn make_pair_from_noises<M: ScoreModel + ?Sized>(
    x_c: &DVector<f64>,
    t: usize,
    eps_a: DVector<f64>,
    eps_b: DVector<f64>,
    model: &M,
    reward: &RewardSpec,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<WinLosePair> {
    if !x_c.iter().all(|v| v.is_finite()) {
        return Err(PsdError::Numerical("non-finite render".into()));
    }
    let state_a = add_noise(x_c, t, &eps_a, schedule)?;
    let state_b = add_noise(x_c, t, &eps_b, schedule)?;
    let x0_a = guided_one_step(model, &state_a, y, neg, gamma, schedule)?;
    let x0_b = guided_one_step(model, &state_b, y, neg, gamma, schedule)?;
    let outcome = reward.rank_pair(y, &x0_a, &x0_b)?;
    let pair = if outcome.winner_index == 0 {
        WinLosePair {
            x_c: x_c.clone(),
            t,
            x_t_win: state_a.x,
            x_t_lose: state_b.x,
            eps_win: eps_a,
            eps_lose: eps_b,
            x0hat_win: x0_a,
            x0hat_lose: x0_b,
            outcome,
            tau: None,
        }
    } else {
        WinLosePair {
            x_c: x_c.clone(),
            t,
            x_t_win: state_b.x,
            x_t_lose: state_a.x,
            eps_win: eps_b,
            eps_lose: eps_a,
            x0hat_win: x0_b,
            x0hat_lose: x0_a,
            outcome,
            tau: None,
        }
    };
    Ok(pair)
}

/// Draws the pair's noises from the run streams and builds the pair.
#[allow(clippy::too_many_arguments)]
pub fn make_pair<M: ScoreModel + ?Sized>(
    x_c: &DVector<f64>,
    t: usize,
    noising: NoisingStrategy,
    model: &M,
    reward: &RewardSpec,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
    streams: &mut RunStreams,
) -> Result<WinLosePair> {
    schedule.check_timestep(t)?;
    let d = x_c.len();
    check_len("render", model.data_dim(), d)?;
    match noising {
        NoisingStrategy::Independent => {
            let eps_a = standard_normal(&mut streams.noise_a, d);
            let eps_b = standard_normal(&mut streams.noise_b, d);
            make_pair_from_noises(x_c, t, eps_a, eps_b, model, reward, y, neg, gamma, schedule)
        }
        NoisingStrategy::InversionPredicted { tau_min, tau_max } => {
            if tau_min > tau_max {
                return Err(PsdError::Parameter(format!("empty time-shift interval [{tau_min}, {tau_max}]")));
            }
            let tau = streams.time_shift.random_range(tau_min..=tau_max);
            let s = t + tau;
            if s > schedule.num_steps() {
                return Err(PsdError::Range(format!(
                    "shifted timestep {t} + {tau} exceeds {}",
                    schedule.num_steps()
                )));
            }
            let eps_b = standard_normal(&mut streams.noise_b, d);
            let shifted = add_noise(x_c, s, &eps_b, schedule)?;
            let eps_a = model.eps_predict(&shifted, y, schedule)?;
            let mut pair = make_pair_from_noises(x_c, t, eps_a, eps_b, model, reward, y, neg, gamma, schedule)?;
            pair.tau = Some(tau);
            Ok(pair)
        }
    }
}

/// `delta_pref`: guided prediction at the winner minus at the loser.
pub fn preference_guidance<M: ScoreModel + ?Sized>(
    pair: &WinLosePair,
    model: &M,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    let win = cfg_eps(model, &pair.win_state(), y, neg, gamma, schedule)?;
    let lose = cfg_eps(model, &pair.lose_state(), y, neg, gamma, schedule)?;
    Ok(win - lose)
}

/// `beta_r`, or zero when the preference term vanishes.
pub fn adaptive_scale(gamma: f64, norm_cls: f64, norm_pref: f64, pref_weight: f64) -> f64 {
    if norm_pref > 0.0 {
        gamma * (norm_cls / norm_pref) * pref_weight
    } else {
        0.0
    }
}

pub fn compose_terms<M: ScoreModel + ?Sized>(
    pair: &WinLosePair,
    model: &M,
    y: &Embedding,
    neg: &Embedding,
    gamma: f64,
    schedule: &Schedule,
) -> Result<GuidanceTerms> {
    let win = pair.win_state();
    let uncond = Embedding::unconditional(model.embed_dim());
    let eps_uncond = model.eps_predict(&win, &uncond, schedule)?;
    let eps_y = model.eps_predict(&win, y, schedule)?;
    let eps_neg = model.eps_predict(&win, neg, schedule)?;
    let delta_gen = eps_uncond - &pair.eps_win;
    let delta_cls = eps_y - eps_neg;
    let delta_pref = preference_guidance(pair, model, y, neg, gamma, schedule)?;
    let pref_weight = pair.outcome.misranking_weight();
    let beta_r = adaptive_scale(gamma, delta_cls.norm(), delta_pref.norm(), pref_weight);
    Ok(GuidanceTerms { delta_gen, delta_cls, delta_pref, beta_r, pref_weight })
}

/// `delta_gen + gamma * delta_cls + beta_r * delta_pref`.
pub fn total_update(terms: &GuidanceTerms, gamma: f64) -> DVector<f64> {
    &terms.delta_gen + &terms.delta_cls * gamma + &terms.delta_pref * terms.beta_r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardSpec;
    use crate::schedule::ScheduleKind;
    use crate::score::GmmScoreModel;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: GmmScoreModel,
        reward: RewardSpec,
        schedule: Schedule,
        y: Embedding,
        neg: Embedding,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        Fixture {
            model: GmmScoreModel::random(&mut rng, 3, 2, 2).unwrap(),
            reward: RewardSpec::quadratic(DMatrix::identity(2, 2), DVector::from_vec(vec![0.3, -0.2]), 1.0).unwrap(),
            schedule: Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2).unwrap(),
            y: Embedding::positive(DVector::from_vec(vec![0.8, -0.4])),
            neg: Embedding::negative(DVector::from_vec(vec![-0.1, 0.2])),
        }
    }

    fn terms(delta_cls: Vec<f64>, delta_pref: Vec<f64>, delta_r: f64, gamma: f64) -> GuidanceTerms {
        let delta_cls = DVector::from_vec(delta_cls);
        let delta_pref = DVector::from_vec(delta_pref);
        let pref_weight = crate::rewards::sigmoid(-delta_r);
        let beta_r = adaptive_scale(gamma, delta_cls.norm(), delta_pref.norm(), pref_weight);
        GuidanceTerms { delta_gen: DVector::zeros(2), delta_cls, delta_pref, beta_r, pref_weight }
    }

    #[test]
    fn beta_r_worked_example() {
        let t = terms(vec![2.0, 0.0], vec![0.0, 4.0], 0.0, 7.5);
        assert!((t.beta_r - 1.875).abs() < 1e-15);
    }

    #[test]
    fn beta_r_vanishes_for_confident_pairs() {
        let t = terms(vec![2.0, 0.0], vec![0.0, 4.0], 1e4, 7.5);
        assert_eq!(t.beta_r, 0.0);
    }

    #[test]
    fn total_update_reductions() {
        let mut t = terms(vec![1.0, 2.0], vec![3.0, 4.0], 0.3, 0.0);
        t.delta_gen = DVector::from_vec(vec![0.25, -0.5]);
        t.beta_r = 0.0;
        assert_eq!(total_update(&t, 0.0), t.delta_gen);
    }

    #[test]
    fn identical_noises_give_degenerate_pair() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![0.4, 0.1]);
        let eps = DVector::from_vec(vec![0.7, -1.1]);
        let pair = make_pair_from_noises(&x_c, 300, eps.clone(), eps, &f.model, &f.reward, &f.y, &f.neg, 3.0, &f.schedule).unwrap();
        assert_eq!(pair.outcome.delta_r, 0.0);
        assert_eq!(pair.outcome.p_win, 0.5);
        let terms = compose_terms(&pair, &f.model, &f.y, &f.neg, 3.0, &f.schedule).unwrap();
        assert_eq!(terms.delta_pref, DVector::zeros(2));
        assert_eq!(terms.beta_r, 0.0);
        let expected = &terms.delta_gen + &terms.delta_cls * 3.0;
        assert_eq!(total_update(&terms, 3.0), expected);
    }

    #[test]
    fn swapping_branches_negates_preference_term() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![-0.4, 0.9]);
        let pair = make_pair_from_noises(
            &x_c,
            600,
            DVector::from_vec(vec![0.2, 1.3]),
            DVector::from_vec(vec![-0.9, 0.4]),
            &f.model,
            &f.reward,
            &f.y,
            &f.neg,
            2.0,
            &f.schedule,
        )
        .unwrap();
        let fwd = preference_guidance(&pair, &f.model, &f.y, &f.neg, 2.0, &f.schedule).unwrap();
        let back = preference_guidance(&pair.swapped(), &f.model, &f.y, &f.neg, 2.0, &f.schedule).unwrap();
        assert_eq!(fwd, -back);
    }

    #[test]
    fn pair_fields_are_consistent() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![0.1, 0.2]);
        let mut streams = RunStreams::new(4);
        let pair = make_pair(&x_c, 500, NoisingStrategy::Independent, &f.model, &f.reward, &f.y, &f.neg, 2.0, &f.schedule, &mut streams).unwrap();
        let (a, s) = (f.schedule.alpha(500), f.schedule.sigma(500));
        assert!((&pair.x_t_win - (&x_c * a + &pair.eps_win * s)).amax() < 1e-15);
        assert!((&pair.x_t_lose - (&x_c * a + &pair.eps_lose * s)).amax() < 1e-15);
        assert!(pair.outcome.delta_r >= 0.0);
        let r_w = f.reward.reward(&f.y, &pair.x0hat_win).unwrap();
        let r_l = f.reward.reward(&f.y, &pair.x0hat_lose).unwrap();
        assert_eq!(pair.outcome.delta_r, r_w - r_l);
    }

    #[test]
    fn seeded_pairs_repeat_bit_for_bit() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![0.1, 0.2]);
        let noising = NoisingStrategy::InversionPredicted { tau_min: 100, tau_max: 300 };
        let build = || {
            let mut streams = RunStreams::new(77);
            make_pair(&x_c, 400, noising, &f.model, &f.reward, &f.y, &f.neg, 2.0, &f.schedule, &mut streams).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn inversion_shift_past_schedule_end_is_range_error() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![0.1, 0.2]);
        let mut streams = RunStreams::new(1);
        let noising = NoisingStrategy::InversionPredicted { tau_min: 200, tau_max: 200 };
        let err = make_pair(&x_c, 900, noising, &f.model, &f.reward, &f.y, &f.neg, 2.0, &f.schedule, &mut streams);
        assert!(matches!(err, Err(PsdError::Range(_))));
    }

    #[test]
    fn inversion_noise_is_the_shifted_conditional_prediction() {
        let f = fixture();
        let x_c = DVector::from_vec(vec![0.1, 0.2]);
        let noising = NoisingStrategy::InversionPredicted { tau_min: 150, tau_max: 150 };
        let mut streams = RunStreams::new(8);
        let pair = make_pair(&x_c, 300, noising, &f.model, &f.reward, &f.y, &f.neg, 2.0, &f.schedule, &mut streams).unwrap();
        let mut replay = RunStreams::new(8);
        let eps_b = standard_normal(&mut replay.noise_b, 2);
        let shifted = add_noise(&x_c, 450, &eps_b, &f.schedule).unwrap();
        let eps_a = f.model.eps_predict(&shifted, &f.y, &f.schedule).unwrap();
        let (win, lose) = if pair.outcome.winner_index == 0 { (&pair.eps_win, &pair.eps_lose) } else { (&pair.eps_lose, &pair.eps_win) };
        assert_eq!(win, &eps_a);
        assert_eq!(lose, &eps_b);
        assert_eq!(pair.tau, Some(150));
    }
}
