#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use psd_core::rewards::RewardSpec;
use psd_core::schedule::{Schedule, ScheduleKind};
use psd_core::score::{Embedding, GmmScoreModel};
use psd_core::streams::standard_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn schedule() -> Schedule {
    Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DVector<f64> {
    standard_normal(rng, dim) * scale
}

pub fn spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(dim, dim, |_, _| 0.5 * rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(dim, dim) * 0.4
}

pub fn random_single(rng: &mut ChaCha8Rng, d: usize, de: usize) -> GmmScoreModel {
    let a = DMatrix::from_fn(d, de, |_, _| rng.random_range(-1.0..1.0));
    let b = gauss(rng, d, 1.0);
    let cov = spd(rng, d);
    GmmScoreModel::single(a, b, cov).unwrap()
}

pub fn random_quadratic(rng: &mut ChaCha8Rng, d: usize, de: usize) -> RewardSpec {
    let m = DMatrix::from_fn(d, de, |_, _| rng.random_range(-0.5..0.5));
    RewardSpec::quadratic(m, gauss(rng, d, 1.0), rng.random_range(0.2..2.0)).unwrap()
}

pub fn random_rbf(rng: &mut ChaCha8Rng, d: usize, de: usize) -> RewardSpec {
    let m = DMatrix::from_fn(d, de, |_, _| rng.random_range(-0.5..0.5));
    RewardSpec::rbf(m, gauss(rng, d, 1.0), rng.random_range(0.2..2.0), rng.random_range(0.7..2.0)).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, de: usize) -> Embedding {
    Embedding::positive(gauss(rng, de, 1.0))
}

pub fn negative(rng: &mut ChaCha8Rng, de: usize) -> Embedding {
    Embedding::negative(gauss(rng, de, 1.0))
}

/// A timestep away from both ends of the schedule.
pub fn interior_t(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(20..=950)
}
