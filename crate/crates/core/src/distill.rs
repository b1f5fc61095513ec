//! Distillation loops: PSD, the baselines it is compared against, and the
//! parameterized-latent generation mode.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};
use crate::guidance::{compose_terms, make_pair, GuidanceTerms, NoisingStrategy, WinLosePair};
use crate::representation::{RenderMode, Representation};
use crate::rewards::RewardSpec;
use crate::schedule::{add_noise, Schedule};
use crate::score::{cfg_eps, guided, Embedding, ScoreModel};
use crate::streams::{standard_normal, RunStreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Psd,
    Sds,
    Csd,
    DreamDpo,
    DreamReward,
    PrefOnly,
    /// `delta_gen + gamma * delta_cls` on the winner branch of a pair; PSD's
    /// objective without the preference term, computed on its own path.
    CfgDistill,
}

impl Method {
    fn uses_pair(self) -> bool {
        matches!(self, Method::Psd | Method::DreamDpo | Method::PrefOnly | Method::CfgDistill)
    }
}

/// How `beta_r` is chosen for PSD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRMode {
    Adaptive,
    /// `beta_r = 0`: PSD without the preference term.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unit,
    SigmaSquared,
}

impl Weighting {
    pub fn weight(self, schedule: &Schedule, t: usize) -> f64 {
        match self {
            Weighting::Unit => 1.0,
            Weighting::SigmaSquared => schedule.sigma(t).powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisingKind {
    Independent,
    InversionPredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub t_max_frac: f64,
    pub t_min_frac: f64,
}

impl Default for Anneal {
    fn default() -> Self {
        Self { t_max_frac: 0.98, t_min_frac: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub gamma: f64,
    /// Temperature of the reward-regularized objective; used by diagnostics.
    pub beta: f64,
    pub lr_theta: f64,
    pub lr_neg: f64,
    pub neg_update_interval: usize,
    pub num_iters: usize,
    pub anneal: Anneal,
    pub w_t: Weighting,
    pub lambda_r: f64,
    /// Time-shift interval `[T1, T2]` in timestep units.
    pub tau_interval: [usize; 2],
    pub noising: NoisingKind,
    pub beta_r_mode: BetaRMode,
    pub cameras_per_iter: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Psd,
            gamma: 7.5,
            beta: 1.0,
            lr_theta: 0.01,
            lr_neg: 3e-4,
            neg_update_interval: 1,
            num_iters: 500,
            anneal: Anneal::default(),
            w_t: Weighting::Unit,
            lambda_r: 1.0,
            tau_interval: [100, 300],
            noising: NoisingKind::Independent,
            beta_r_mode: BetaRMode::Adaptive,
            cameras_per_iter: 1,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let param = |msg: String| Err(PsdError::Parameter(msg));
        let a = self.anneal;
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(a.t_max_frac) || !frac_ok(a.t_min_frac) || a.t_max_frac < a.t_min_frac {
            return param(format!("anneal fractions must satisfy 0 < t_min_frac <= t_max_frac <= 1, got {a:?}"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return param(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.lr_theta >= 0.0) || !self.lr_theta.is_finite() {
            return param(format!("lr_theta must be finite and >= 0, got {}", self.lr_theta));
        }
        if !(self.lr_neg >= 0.0) || !self.lr_neg.is_finite() {
            return param(format!("lr_neg must be finite and >= 0, got {}", self.lr_neg));
        }
        if self.neg_update_interval == 0 {
            return param("neg_update_interval must be positive".into());
        }
        if self.cameras_per_iter == 0 {
            return param("cameras_per_iter must be positive".into());
        }
        if self.tau_interval[0] > self.tau_interval[1] {
            return param(format!("empty tau interval {:?}", self.tau_interval));
        }
        if !self.beta.is_finite() || !self.lambda_r.is_finite() {
            return param("beta and lambda_r must be finite".into());
        }
        let p = self.adam;
        if !(0.0..1.0).contains(&p.beta1) || !(0.0..1.0).contains(&p.beta2) || !(p.eps > 0.0) {
            return param(format!("invalid optimizer parameters {p:?}"));
        }
        Ok(())
    }

    pub fn noising_strategy(&self) -> NoisingStrategy {
        match self.noising {
            NoisingKind::Independent => NoisingStrategy::Independent,
            NoisingKind::InversionPredicted => NoisingStrategy::InversionPredicted {
                tau_min: self.tau_interval[0],
                tau_max: self.tau_interval[1],
            },
        }
    }
}

/// The target reward plus held-out rewards evaluated for observation only.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSet {
    pub target: RewardSpec,
    pub heldout: Vec<RewardSpec>,
}

/// Everything a step reads but never mutates.
#[derive(Clone, Copy)]
pub struct Problem<'a, M: ScoreModel + ?Sized> {
    pub model: &'a M,
    pub rewards: &'a RewardSet,
    pub y: &'a Embedding,
    pub schedule: &'a Schedule,
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self { m: DVector::zeros(dim), v: DVector::zeros(dim), steps: 0 }
    }

    /// Returns the bias-corrected step direction for `grad` (not yet scaled by the learning rate).
    pub fn direction(&mut self, grad: &DVector<f64>, p: &AdamParams) -> DVector<f64> {
        self.steps += 1;
        self.m = &self.m * p.beta1 + grad * (1.0 - p.beta1);
        self.v = &self.v * p.beta2 + grad.component_mul(grad) * (1.0 - p.beta2);
        let c1 = 1.0 - p.beta1.powi(self.steps as i32);
        let c2 = 1.0 - p.beta2.powi(self.steps as i32);
        DVector::from_fn(grad.len(), |i, _| (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + p.eps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub rep: Representation,
    pub neg: Embedding,
    pub iter: usize,
    pub theta_moments: Adam,
    pub neg_moments: Adam,
}

impl OptimState {
    pub fn new(rep: Representation, neg: Embedding) -> Self {
        let theta_moments = Adam::new(rep.param_dim());
        let neg_moments = Adam::new(neg.dim());
        Self { rep, neg, iter: 0, theta_moments, neg_moments }
    }
}

/// One metrics row. Single-noise methods log their one branch as both
/// winner and loser.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub t: usize,
    pub camera: usize,
    pub r_win: f64,
    pub r_lose: f64,
    pub delta_r: f64,
    pub beta_r: f64,
    pub pref_weight: f64,
    pub norm_gen: f64,
    pub norm_cls: f64,
    pub norm_pref: f64,
    /// `|beta_r (eps_win - eps_lose)|`, the size of the noise terms the
    /// preference objective leaves out.
    pub norm_q_dropped: f64,
    pub reward_target: f64,
    pub reward_heldout: Vec<f64>,
}

/// Mean reward over every view of the representation.
pub fn representation_reward(rep: &Representation, reward: &RewardSpec, y: &Embedding) -> Result<f64> {
    let n = rep.num_cameras();
    let mut total = 0.0;
    for c in 0..n {
        total += reward.reward(y, &rep.render(c)?.x)?;
    }
    Ok(total / n as f64)
}

pub fn rewards_of(rep: &Representation, rewards: &RewardSet, y: &Embedding) -> Result<(f64, Vec<f64>)> {
    let target = representation_reward(rep, &rewards.target, y)?;
    let heldout = rewards.heldout.iter().map(|r| representation_reward(rep, r, y)).collect::<Result<Vec<_>>>()?;
    Ok((target, heldout))
}

/// `t(tau)`: linear from `t_max_frac * T` at the first iteration to
/// `t_min_frac * T` at the last, rounded and kept within `[1, T]`.
pub fn anneal_timestep(iter: usize, num_iters: usize, anneal: Anneal, schedule: &Schedule) -> usize {
    let total = schedule.num_steps() as f64;
    let hi = anneal.t_max_frac * total;
    let lo = anneal.t_min_frac * total;
    let frac = if num_iters <= 1 { 0.0 } else { (iter as f64 / (num_iters - 1) as f64).min(1.0) };
    let t = (hi + (lo - hi) * frac).round() as usize;
    t.clamp(1, schedule.num_steps())
}

/// `grad_n r(y, x0hat)` with `x0hat` the guided one-step prediction at the
/// winner branch. Through the guided prediction,
/// `d x0hat / d n = (sigma / alpha) (gamma - 1) J_n`.
pub fn neg_gradient<M: ScoreModel + ?Sized>(
    pair: &WinLosePair,
    neg: &Embedding,
    gamma: f64,
    problem: &Problem<'_, M>,
) -> Result<DVector<f64>> {
    let s = problem.schedule;
    let state = pair.win_state();
    let (alpha, sigma) = (s.alpha(state.t), s.sigma(state.t));
    if alpha == 0.0 {
        return Err(PsdError::SingularSchedule(state.t));
    }
    let jac = problem.model.eps_embedding_jacobian(&state, neg, s)?;
    let grad_r = problem.rewards.target.reward_gradient(problem.y, &pair.x0hat_win)?;
    Ok(jac.tr_mul(&grad_r) * (sigma / alpha * (gamma - 1.0)))
}

/// Ascends the target reward in the negative embedding using the pairs of
/// one iteration (averaged over their cameras).
pub fn neg_embed_step<M: ScoreModel + ?Sized>(
    mut state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    pairs: &[WinLosePair],
) -> Result<OptimState> {
    if !(config.lr_neg > 0.0) {
        return Err(PsdError::Parameter("negative-embedding update needs lr_neg > 0".into()));
    }
    if pairs.is_empty() {
        return Ok(state);
    }
    let mut grad = DVector::zeros(state.neg.dim());
    for pair in pairs {
        grad += neg_gradient(pair, &state.neg, config.gamma, problem)?;
    }
    grad /= pairs.len() as f64;
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(state);
    }
    let dir = state.neg_moments.direction(&grad, &config.adam);
    state.neg.v += dir * config.lr_neg;
    check_finite(&state.neg.v, "negative embedding")?;
    Ok(state)
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PsdError::Numerical(format!("{what} became non-finite")))
    }
}

/// Data-space update and per-camera diagnostics of one render.
struct ViewUpdate {
    camera: usize,
    t: usize,
    direction: DVector<f64>,
    pair: Option<WinLosePair>,
    terms: Option<GuidanceTerms>,
    r_single: f64,
}

/// The DreamDPO bracket `(eps~(x_w) - eps_w) - (eps~(x_l) - eps_l)`.
pub fn dreamdpo_direction<M: ScoreModel + ?Sized>(
    pair: &WinLosePair,
    neg: &Embedding,
    gamma: f64,
    problem: &Problem<'_, M>,
) -> Result<DVector<f64>> {
    let (m, s, y) = (problem.model, problem.schedule, problem.y);
    let win = cfg_eps(m, &pair.win_state(), y, neg, gamma, s)? - &pair.eps_win;
    let lose = cfg_eps(m, &pair.lose_state(), y, neg, gamma, s)? - &pair.eps_lose;
    Ok(win - lose)
}

/// `(eps(x_w, 0) - eps_w) + gamma (eps(x_w, y) - eps(x_w, n))`.
pub fn cfg_distill_direction<M: ScoreModel + ?Sized>(
    pair: &WinLosePair,
    neg: &Embedding,
    gamma: f64,
    problem: &Problem<'_, M>,
) -> Result<DVector<f64>> {
    let (m, s, y) = (problem.model, problem.schedule, problem.y);
    let win = pair.win_state();
    let eps_uncond = m.eps_predict(&win, &Embedding::unconditional(m.embed_dim()), s)?;
    let eps_y = m.eps_predict(&win, y, s)?;
    let eps_neg = m.eps_predict(&win, neg, s)?;
    Ok((eps_uncond - &pair.eps_win) + (eps_y - eps_neg) * gamma)
}

fn view_update<M: ScoreModel + ?Sized>(
    state: &OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
    t: usize,
) -> Result<ViewUpdate> {
    let (m, s, y) = (problem.model, problem.schedule, problem.y);
    let camera = match state.rep.mode() {
        RenderMode::MultiView => state.rep.sample_camera(&mut streams.camera)?,
        RenderMode::RawLatent => 0,
    };
    let x_c = state.rep.render(camera)?.x;
    let gamma = config.gamma;
    let neg = &state.neg;

    if config.method.uses_pair() {
        let pair = make_pair(&x_c, t, config.noising_strategy(), m, &problem.rewards.target, y, neg, gamma, s, streams)?;
        let (direction, terms) = match config.method {
            Method::Psd => {
                let mut terms = compose_terms(&pair, m, y, neg, gamma, s)?;
                if config.beta_r_mode == BetaRMode::Zero {
                    terms.beta_r = 0.0;
                }
                (crate::guidance::total_update(&terms, gamma), Some(terms))
            }
            Method::PrefOnly => {
                let terms = compose_terms(&pair, m, y, neg, gamma, s)?;
                (&terms.delta_pref * terms.beta_r, Some(terms))
            }
            Method::DreamDpo => (dreamdpo_direction(&pair, neg, gamma, problem)?, None),
            Method::CfgDistill => (cfg_distill_direction(&pair, neg, gamma, problem)?, None),
            _ => unreachable!("single-noise method routed to the pair path"),
        };
        return Ok(ViewUpdate { camera, t, direction, pair: Some(pair), terms, r_single: 0.0 });
    }

    let eps = standard_normal(&mut streams.noise_a, x_c.len());
    let noisy = add_noise(&x_c, t, &eps, s)?;
    let eps_y = m.eps_predict(&noisy, y, s)?;
    let eps_neg = m.eps_predict(&noisy, neg, s)?;
    let guided_eps = guided(&eps_y, &eps_neg, gamma);
    let x0 = crate::schedule::tweedie_predict(&noisy, &guided_eps, s)?;
    let r_single = problem.rewards.target.reward(y, &x0)?;
    let w = config.w_t.weight(s, t);
    let direction = match config.method {
        Method::Sds => (guided_eps - eps) * w,
        Method::DreamReward => {
            let grad_r = problem.rewards.target.reward_gradient(y, &x_c)?;
            ((guided_eps - grad_r * config.lambda_r) - eps) * w
        }
        Method::Csd => (eps_y - eps_neg) * gamma,
        _ => unreachable!("pair method routed to the single-noise path"),
    };
    Ok(ViewUpdate { camera, t, direction, pair: None, terms: None, r_single })
}

/// One iteration of the configured method. Returns the advanced state and
/// the metrics row (rewards measured after the update).
fn iteration<M: ScoreModel + ?Sized>(
    mut state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
    allow_neg_update: bool,
) -> Result<(OptimState, StepRecord)> {
    let t = anneal_timestep(state.iter, config.num_iters, config.anneal, problem.schedule);
    let mut grad = DVector::zeros(state.rep.param_dim());
    let mut views = Vec::with_capacity(config.cameras_per_iter);
    for _ in 0..config.cameras_per_iter {
        let view = view_update(&state, config, problem, streams, t)?;
        grad += state.rep.render_vjp(view.camera, &view.direction)?;
        views.push(view);
    }
    grad /= config.cameras_per_iter as f64;
    check_finite(&grad, "parameter gradient")?;
    if config.lr_theta > 0.0 {
        let dir = state.theta_moments.direction(&grad, &config.adam);
        state.rep.theta -= dir * config.lr_theta;
        check_finite(&state.rep.theta, "parameters")?;
    }

    let neg_due = allow_neg_update
        && config.method == Method::Psd
        && config.lr_neg > 0.0
        && state.iter.is_multiple_of(config.neg_update_interval);
    if neg_due {
        let pairs: Vec<WinLosePair> = views.iter().filter_map(|v| v.pair.clone()).collect();
        state = neg_embed_step(state, config, problem, &pairs)?;
    }

    let first = &views[0];
    let (reward_target, reward_heldout) = rewards_of(&state.rep, problem.rewards, problem.y)?;
    let mut record = StepRecord {
        iter: state.iter,
        t: first.t,
        camera: first.camera,
        r_win: first.r_single,
        r_lose: first.r_single,
        delta_r: 0.0,
        beta_r: 0.0,
        pref_weight: 0.5,
        norm_gen: 0.0,
        norm_cls: 0.0,
        norm_pref: 0.0,
        norm_q_dropped: 0.0,
        reward_target,
        reward_heldout,
    };
    if let Some(pair) = &first.pair {
        record.r_win = pair.outcome.r_win;
        record.r_lose = pair.outcome.r_lose;
        record.delta_r = pair.outcome.delta_r;
        record.pref_weight = pair.outcome.misranking_weight();
    }
    if let Some(terms) = &first.terms {
        let pair = first.pair.as_ref().expect("terms come from a pair");
        record.beta_r = terms.beta_r;
        record.norm_gen = terms.delta_gen.norm();
        record.norm_cls = terms.delta_cls.norm();
        record.norm_pref = terms.delta_pref.norm();
        record.norm_q_dropped = ((&pair.eps_win - &pair.eps_lose) * terms.beta_r).norm();
    }
    state.iter += 1;
    Ok((state, record))
}

fn abort_at(iter: usize) -> impl FnOnce(PsdError) -> PsdError {
    move |e| match e {
        already @ PsdError::Aborted { .. } => already,
        other => PsdError::Aborted { iter, source: Box::new(other) },
    }
}

/// One full PSD iteration including the scheduled negative-embedding update.
pub fn psd_step<M: ScoreModel + ?Sized>(
    state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
) -> Result<(OptimState, StepRecord)> {
    if config.method != Method::Psd {
        return Err(PsdError::Parameter(format!("psd_step called with method {:?}", config.method)));
    }
    let iter = state.iter;
    iteration(state, config, problem, streams, true).map_err(abort_at(iter))
}

pub fn baseline_step<M: ScoreModel + ?Sized>(
    state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
) -> Result<(OptimState, StepRecord)> {
    if config.method == Method::Psd {
        return Err(PsdError::Parameter("baseline_step called with method Psd".into()));
    }
    let iter = state.iter;
    iteration(state, config, problem, streams, false).map_err(abort_at(iter))
}

pub fn step<M: ScoreModel + ?Sized>(
    state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
) -> Result<(OptimState, StepRecord)> {
    match config.method {
        Method::Psd => psd_step(state, config, problem, streams),
        _ => baseline_step(state, config, problem, streams),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial_reward_target: f64,
    pub initial_reward_heldout: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// Wall-clock per iteration, kept apart from the deterministic records.
    pub timings: Vec<Duration>,
    pub final_state: OptimState,
}

/// Runs `config.num_iters` iterations from `state`.
pub fn run<M: ScoreModel + ?Sized>(
    mut state: OptimState,
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    streams: &mut RunStreams,
) -> Result<RunOutput> {
    config.validate()?;
    check_len("representation output", problem.model.data_dim(), state.rep.data_dim())?;
    check_len("negative embedding", problem.model.embed_dim(), state.neg.dim())?;
    let (initial_reward_target, initial_reward_heldout) = rewards_of(&state.rep, problem.rewards, problem.y)?;
    let mut records = Vec::with_capacity(config.num_iters);
    let mut timings = Vec::with_capacity(config.num_iters);
    while state.iter < config.num_iters {
        let start = Instant::now();
        let (next, record) = step(state, config, problem, streams)?;
        timings.push(start.elapsed());
        records.push(record);
        state = next;
    }
    Ok(RunOutput { initial_reward_target, initial_reward_heldout, records, timings, final_state: state })
}

#[derive(Debug, Clone)]
pub struct ImageGenOutput {
    /// Latent before the first step and after each step.
    pub latents: Vec<DVector<f64>>,
    pub records: Vec<StepRecord>,
    pub timings: Vec<Duration>,
}

/// Parameterized-latent generation: the latent starts from `N(0, I)`, then
/// takes `num_iters` PSD updates at annealed timesteps without touching the
/// negative embedding.
pub fn image_gen_run<M: ScoreModel + ?Sized>(
    config: &DistillConfig,
    problem: &Problem<'_, M>,
    neg: &Embedding,
    streams: &mut RunStreams,
) -> Result<ImageGenOutput> {
    config.validate()?;
    if config.method != Method::Psd {
        return Err(PsdError::Parameter(format!(
            "latent generation runs PSD with or without the preference term, got {:?}",
            config.method
        )));
    }
    let d = problem.model.data_dim();
    let t_top = anneal_timestep(0, config.num_iters, config.anneal, problem.schedule);
    if config.noising == NoisingKind::InversionPredicted && t_top + config.tau_interval[1] > problem.schedule.num_steps() {
        return Err(PsdError::Range(format!(
            "first timestep {t_top} plus time shift {} exceeds {}",
            config.tau_interval[1],
            problem.schedule.num_steps()
        )));
    }
    let theta = standard_normal(&mut streams.init, d);
    let mut state = OptimState::new(Representation::raw_latent(theta), neg.clone());
    let mut latents = vec![state.rep.theta.clone()];
    let mut records = Vec::with_capacity(config.num_iters);
    let mut timings = Vec::with_capacity(config.num_iters);
    while state.iter < config.num_iters {
        let iter = state.iter;
        let start = Instant::now();
        let (next, record) = iteration(state, config, problem, streams, false).map_err(abort_at(iter))?;
        timings.push(start.elapsed());
        latents.push(next.rep.theta.clone());
        records.push(record);
        state = next;
    }
    Ok(ImageGenOutput { latents, records, timings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::score::GmmScoreModel;
    use nalgebra::DMatrix;

    fn schedule() -> Schedule {
        Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = schedule();
        let a = Anneal { t_max_frac: 0.98, t_min_frac: 0.02 };
        assert_eq!(anneal_timestep(0, 101, a, &s), 980);
        assert_eq!(anneal_timestep(100, 101, a, &s), 20);
        assert_eq!(anneal_timestep(50, 101, a, &s), 500);
        assert_eq!(anneal_timestep(0, 1, a, &s), 980);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut adam = Adam::new(3);
        let g = DVector::from_vec(vec![0.5, -2.0, 1e-3]);
        let d = adam.direction(&g, &AdamParams::default());
        for (di, gi) in d.iter().zip(g.iter()) {
            assert!((di - gi.signum()).abs() < 1e-4);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DistillConfig::default();
        assert!(c.validate().is_ok());
        c.anneal = Anneal { t_max_frac: 0.2, t_min_frac: 0.5 };
        assert!(c.validate().is_err());
        let c = DistillConfig { neg_update_interval: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = DistillConfig { lr_theta: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_theta_and_logs() {
        let s = schedule();
        let model = GmmScoreModel::single(DMatrix::identity(2, 2), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let rewards = RewardSet {
            target: RewardSpec::quadratic(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, 0.0]), 1.0).unwrap(),
            heldout: vec![],
        };
        let y = Embedding::positive(DVector::from_vec(vec![0.5, 0.5]));
        let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
        let theta = DVector::from_vec(vec![0.3, -0.2]);
        let state = OptimState::new(Representation::raw_latent(theta.clone()), Embedding::negative(DVector::zeros(2)));
        let config = DistillConfig { lr_theta: 0.0, lr_neg: 0.0, num_iters: 5, ..Default::default() };
        let out = run(state, &config, &problem, &mut RunStreams::new(3)).unwrap();
        assert_eq!(out.final_state.rep.theta, theta);
        assert_eq!(out.records.len(), 5);
        assert!(out.records.iter().all(|r| r.norm_cls > 0.0));
    }

    #[test]
    fn zero_jacobian_leaves_negative_embedding() {
        let s = schedule();
        let model = GmmScoreModel::single(DMatrix::zeros(2, 2), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let rewards = RewardSet {
            target: RewardSpec::quadratic(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, 0.0]), 1.0).unwrap(),
            heldout: vec![],
        };
        let y = Embedding::positive(DVector::from_vec(vec![0.5, 0.5]));
        let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
        let neg = Embedding::negative(DVector::from_vec(vec![0.1, 0.2]));
        let state = OptimState::new(Representation::raw_latent(DVector::zeros(2)), neg.clone());
        let config = DistillConfig { num_iters: 10, lr_neg: 0.5, ..Default::default() };
        let out = run(state, &config, &problem, &mut RunStreams::new(3)).unwrap();
        assert_eq!(out.final_state.neg, neg);
    }
}
