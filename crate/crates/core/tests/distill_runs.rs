//! Seeded end-to-end runs of the optimization loops.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use psd_core::distill::{image_gen_run, neg_gradient, run, Anneal, BetaRMode, DistillConfig, NoisingKind, OptimState, Problem, RewardSet};
use psd_core::guidance::make_pair_from_noises;
use psd_core::representation::Representation;
use psd_core::rewards::RewardSpec;
use psd_core::score::{Embedding, GmmScoreModel, ScoreModel};
use psd_core::streams::{standard_normal, RunStreams};
use psd_core::tasks::{image_gen_config, standard_model, standard_negative, standard_prompt, standard_representation, standard_rewards, standard_schedule};
use psd_core::PsdError;
use rand::Rng;

#[test]
fn negative_gradient_has_a_positive_chain_coefficient() {
    let s = schedule();
    let mut r = rng(51);
    for _ in 0..100 {
        let model = GmmScoreModel::random(&mut r, 2, 2, 2).unwrap();
        let reward = random_quadratic(&mut r, 2, 2);
        let rewards = RewardSet { target: reward.clone(), heldout: vec![] };
        let (y, n) = (positive(&mut r, 2), negative(&mut r, 2));
        let gamma = r.random_range(1.5..10.0);
        let t = interior_t(&mut r);
        let pair = make_pair_from_noises(&gauss(&mut r, 2, 1.0), t, gauss(&mut r, 2, 1.0), gauss(&mut r, 2, 1.0), &model, &reward, &y, &n, gamma, &s).unwrap();
        let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
        let got = neg_gradient(&pair, &n, gamma, &problem).unwrap();
        let coef = (gamma - 1.0) * s.sigma(t) / s.alpha(t);
        assert!(coef > 0.0);
        let jac = model.eps_embedding_jacobian(&pair.win_state(), &n, &s).unwrap();
        let expected = jac.transpose() * reward.reward_gradient(&y, &pair.x0hat_win).unwrap() * coef;
        assert!((got - &expected).amax() <= 1e-12 * expected.amax().max(1.0));
    }
}

#[test]
fn psd_improves_a_raw_latent_quadratic() {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let mut improved = 0;
    for seed in 0..20 {
        let mut streams = RunStreams::new(seed);
        let theta = standard_normal(&mut streams.init, 2);
        let state = OptimState::new(Representation::raw_latent(theta), standard_negative());
        let out = run(state, &DistillConfig { seed, ..Default::default() }, &problem, &mut streams).unwrap();
        if out.records.last().unwrap().reward_target > out.initial_reward_target {
            improved += 1;
        }
    }
    assert!(improved >= 19, "{improved}/20 seeds improved");
}

#[test]
fn guided_generation_at_unit_scale_lands_near_the_conditional_mean() {
    let s = schedule();
    let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
    let model = GmmScoreModel::single(DMatrix::identity(2, 2) * 0.8, DVector::from_vec(vec![0.6, -0.4]), cov.clone()).unwrap();
    let rewards = RewardSet { target: RewardSpec::quadratic(DMatrix::zeros(2, 2), DVector::from_vec(vec![3.0, 3.0]), 1.0).unwrap(), heldout: vec![] };
    let y = Embedding::positive(DVector::from_vec(vec![0.5, 0.5]));
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let mean = model.mean(&y);
    let prec = cov.try_inverse().unwrap();
    for seed in 0..20 {
        let config = DistillConfig { gamma: 1.0, beta_r_mode: BetaRMode::Zero, ..image_gen_config(seed) };
        let out = image_gen_run(&config, &problem, &Embedding::unconditional(2), &mut RunStreams::new(seed)).unwrap();
        assert_eq!(out.latents.len(), 51);
        let gap = out.latents.last().unwrap() - &mean;
        let mahalanobis = gap.dot(&(&prec * &gap)).sqrt();
        assert!(mahalanobis < 3.0, "seed {seed}: {mahalanobis}");
    }
}

#[test]
fn generation_edge_cases() {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let none = image_gen_run(&DistillConfig { num_iters: 0, ..image_gen_config(3) }, &problem, &standard_negative(), &mut RunStreams::new(3)).unwrap();
    assert_eq!(none.latents.len(), 1);
    assert!(none.records.is_empty());
    let late = DistillConfig { anneal: Anneal { t_max_frac: 0.9, t_min_frac: 0.02 }, ..image_gen_config(3) };
    let err = image_gen_run(&late, &problem, &standard_negative(), &mut RunStreams::new(3)).unwrap_err();
    assert!(matches!(err, PsdError::Range(_)));
    let indep = DistillConfig { noising: NoisingKind::Independent, ..late };
    assert!(image_gen_run(&indep, &problem, &standard_negative(), &mut RunStreams::new(3)).is_ok());
}

#[test]
fn seeded_runs_repeat_exactly() {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let config = DistillConfig { num_iters: 100, cameras_per_iter: 2, seed: 8, ..Default::default() };
    let go = || run(OptimState::new(standard_representation(), standard_negative()), &config, &problem, &mut RunStreams::new(8)).unwrap();
    let (a, b) = (go(), go());
    assert_eq!(a.records, b.records);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn wider_interval_touches_the_negative_embedding_less() {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    for interval in [1, 2, 5] {
        let config = DistillConfig { num_iters: 20, neg_update_interval: interval, ..Default::default() };
        let out = run(OptimState::new(standard_representation(), standard_negative()), &config, &problem, &mut RunStreams::new(0)).unwrap();
        assert_eq!(out.final_state.neg_moments.steps as usize, 20usize.div_ceil(interval));
    }
}
