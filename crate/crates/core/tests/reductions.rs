//! Exact reductions between the methods and the algebraic identities of the
//! composed update.

mod common;

use common::*;
use nalgebra::DVector;
use psd_core::distill::{dreamdpo_direction, run, BetaRMode, DistillConfig, Method, OptimState, Problem, RewardSet};
use psd_core::guidance::{compose_terms, make_pair, make_pair_from_noises, total_update, NoisingStrategy};
use psd_core::rewards::sigmoid;
use psd_core::score::{Embedding, GmmScoreModel};
use psd_core::streams::RunStreams;
use psd_core::tasks::{standard_model, standard_negative, standard_prompt, standard_representation, standard_rewards, standard_schedule};
use rand::Rng;

fn trajectory(config: &DistillConfig) -> (Vec<DVector<f64>>, Vec<f64>) {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let mut state = OptimState::new(standard_representation(), standard_negative());
    let mut streams = RunStreams::new(config.seed);
    let mut thetas = vec![state.rep.theta.clone()];
    let mut rewards_seen = Vec::new();
    while state.iter < config.num_iters {
        let (next, rec) = psd_core::distill::step(state, config, &problem, &mut streams).unwrap();
        thetas.push(next.rep.theta.clone());
        rewards_seen.push(rec.reward_target);
        state = next;
    }
    (thetas, rewards_seen)
}

fn bits(v: &[DVector<f64>]) -> Vec<Vec<u64>> {
    v.iter().map(|x| x.iter().map(|f| f.to_bits()).collect()).collect()
}

#[test]
fn psd_without_preference_is_cfg_distillation() {
    for seed in 0..3 {
        let base = DistillConfig { num_iters: 200, lr_neg: 0.0, seed, ..Default::default() };
        let psd = trajectory(&DistillConfig { beta_r_mode: BetaRMode::Zero, ..base.clone() });
        let cfg = trajectory(&DistillConfig { method: Method::CfgDistill, ..base });
        assert_eq!(bits(&psd.0), bits(&cfg.0));
        assert_eq!(psd.1.iter().map(|r| r.to_bits()).collect::<Vec<_>>(), cfg.1.iter().map(|r| r.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn dreamreward_without_reward_term_is_sds() {
    for seed in 0..3 {
        let base = DistillConfig { num_iters: 200, lambda_r: 0.0, seed, ..Default::default() };
        let sds = trajectory(&DistillConfig { method: Method::Sds, ..base.clone() });
        let dr = trajectory(&DistillConfig { method: Method::DreamReward, ..base });
        assert_eq!(bits(&sds.0), bits(&dr.0));
    }
}

#[test]
fn preference_term_with_unit_weight_is_the_dreamdpo_bracket() {
    let s = schedule();
    let mut r = rng(31);
    for _ in 0..1000 {
        let k = r.random_range(1..=3);
        let model = GmmScoreModel::random(&mut r, k, 2, 2).unwrap();
        let reward = random_quadratic(&mut r, 2, 2);
        let rewards = RewardSet { target: reward.clone(), heldout: vec![] };
        let (y, n) = (positive(&mut r, 2), negative(&mut r, 2));
        let gamma = r.random_range(0.0..10.0);
        let t = interior_t(&mut r);
        let pair = make_pair_from_noises(&gauss(&mut r, 2, 1.0), t, gauss(&mut r, 2, 1.0), gauss(&mut r, 2, 1.0), &model, &reward, &y, &n, gamma, &s).unwrap();
        let terms = compose_terms(&pair, &model, &y, &n, gamma, &s).unwrap();
        // unit weight in place of beta_r, noises put back
        let ours = &terms.delta_pref * 1.0 - (&pair.eps_win - &pair.eps_lose);
        let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
        let theirs = dreamdpo_direction(&pair, &n, gamma, &problem).unwrap();
        assert!((ours - &theirs).amax() <= 1e-12 * theirs.amax().max(1.0));
    }
}

#[test]
fn dreamdpo_with_identical_noises_is_zero() {
    let s = schedule();
    let mut r = rng(32);
    let model = GmmScoreModel::random(&mut r, 2, 2, 2).unwrap();
    let reward = random_quadratic(&mut r, 2, 2);
    let rewards = RewardSet { target: reward.clone(), heldout: vec![] };
    let (y, n) = (positive(&mut r, 2), negative(&mut r, 2));
    let eps = gauss(&mut r, 2, 1.0);
    let pair = make_pair_from_noises(&gauss(&mut r, 2, 1.0), 300, eps.clone(), eps, &model, &reward, &y, &n, 7.5, &s).unwrap();
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    assert_eq!(dreamdpo_direction(&pair, &n, 7.5, &problem).unwrap(), DVector::zeros(2));
}

#[test]
fn norm_balance_holds_on_every_logged_step() {
    let (model, rewards, y, s) = (standard_model().unwrap(), standard_rewards().unwrap(), standard_prompt(), standard_schedule());
    let problem = Problem { model: &model, rewards: &rewards, y: &y, schedule: &s };
    let config = DistillConfig { seed: 4, ..Default::default() };
    let out = run(OptimState::new(standard_representation(), standard_negative()), &config, &problem, &mut RunStreams::new(4)).unwrap();
    assert_eq!(out.records.len(), 500);
    for rec in &out.records {
        let lhs = rec.beta_r * rec.norm_pref;
        let rhs = config.gamma * sigmoid(-rec.delta_r) * rec.norm_cls;
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "iter {}: {lhs} vs {rhs}", rec.iter);
    }
}

#[test]
fn composed_update_matches_elementwise_recomputation() {
    let s = schedule();
    let mut r = rng(33);
    for _ in 0..100 {
        let model = GmmScoreModel::random(&mut r, 2, 3, 2).unwrap();
        let reward = random_rbf(&mut r, 3, 2);
        let (y, n) = (positive(&mut r, 2), negative(&mut r, 2));
        let gamma = r.random_range(0.0..10.0);
        let pair = make_pair_from_noises(&gauss(&mut r, 3, 1.0), interior_t(&mut r), gauss(&mut r, 3, 1.0), gauss(&mut r, 3, 1.0), &model, &reward, &y, &n, gamma, &s).unwrap();
        let terms = compose_terms(&pair, &model, &y, &n, gamma, &s).unwrap();
        let u = total_update(&terms, gamma);
        for i in 0..3 {
            let expect = terms.delta_gen[i] + gamma * terms.delta_cls[i] + terms.beta_r * terms.delta_pref[i];
            assert!((u[i] - expect).abs() <= 1e-14 * expect.abs().max(1.0));
        }
    }
}

#[test]
fn pair_weights_stay_in_the_half_interval() {
    let s = schedule();
    let mut r = rng(34);
    let mut streams = RunStreams::new(34);
    let model = GmmScoreModel::random(&mut r, 3, 2, 2).unwrap();
    let reward = random_quadratic(&mut r, 2, 2);
    let (y, n) = (positive(&mut r, 2), Embedding::unconditional(2));
    for i in 0..20_000 {
        let noising = if i % 2 == 0 { NoisingStrategy::Independent } else { NoisingStrategy::InversionPredicted { tau_min: 100, tau_max: 300 } };
        let pair = make_pair(&gauss(&mut r, 2, 1.5), r.random_range(1..=700), noising, &model, &reward, &y, &n, 7.5, &s, &mut streams).unwrap();
        let w = pair.outcome.misranking_weight();
        assert!(w > 0.0 && w <= 0.5, "weight {w}");
        assert!(pair.outcome.delta_r >= 0.0);
    }
}
