//! The standard two-mode task used by the efficacy checks and default configs.
//!
//! Prior: two components sharing the mean `A e + b` (`A = 0.5 I`,
//! `b = (1, 0)`) with covariances `0.25 I` and a tilted, wider one. The
//! target reward is a quadratic whose maximizer `(2, 1)` is off the guided
//! mean, so plain guidance settles short of it and the negative embedding
//! has to move the fixed point. Two held-out rewards peak elsewhere.

use nalgebra::{DMatrix, DVector};

use crate::distill::{Anneal, DistillConfig, NoisingKind, RewardSet};
use crate::error::Result;
use crate::representation::Representation;
use crate::rewards::RewardSpec;
use crate::schedule::{Schedule, ScheduleKind};
use crate::score::{Embedding, GmmScoreModel};

pub const DATA_DIM: usize = 2;
pub const EMBED_DIM: usize = 2;

pub fn standard_schedule() -> Schedule {
    Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2).expect("default schedule is valid")
}

pub fn standard_model() -> Result<GmmScoreModel> {
    let a = DMatrix::identity(DATA_DIM, EMBED_DIM) * 0.5;
    let b = DVector::from_vec(vec![1.0, 0.0]);
    GmmScoreModel::new(
        vec![0.6, 0.4],
        vec![a.clone(), a],
        vec![b.clone(), b],
        vec![DMatrix::identity(DATA_DIM, DATA_DIM) * 0.25, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])],
    )
}

pub fn standard_prompt() -> Embedding {
    Embedding::positive(DVector::from_vec(vec![0.0, 0.4]))
}

pub fn standard_negative() -> Embedding {
    Embedding::negative(DVector::from_vec(vec![0.0, 0.15]))
}

pub fn standard_rewards() -> Result<RewardSet> {
    let zero = DMatrix::zeros(DATA_DIM, EMBED_DIM);
    Ok(RewardSet {
        target: RewardSpec::quadratic(zero.clone(), DVector::from_vec(vec![2.0, 1.0]), 1.0)?,
        heldout: vec![
            RewardSpec::rbf(zero.clone(), DVector::from_vec(vec![1.5, 0.5]), 1.0, 1.0)?,
            RewardSpec::quadratic(zero, DVector::from_vec(vec![0.0, 0.5]), 0.1)?,
        ],
    })
}

/// Blend weights of the standard camera rig over `theta = (u, v)`.
pub const STANDARD_BLENDS: [f64; 4] = [1.0, 0.0, 0.5, 0.25];

/// Four blended cameras over a zero-initialized `theta`.
pub fn standard_representation() -> Representation {
    Representation::blended_halves(DVector::zeros(2 * DATA_DIM), &STANDARD_BLENDS).expect("standard rig is valid")
}

/// Latent-generation settings: 50 steps from `0.7 T`, so that the shifted
/// timestep of inversion-predicted noise stays inside the schedule.
pub fn image_gen_config(seed: u64) -> DistillConfig {
    DistillConfig {
        num_iters: 50,
        lr_theta: 0.1,
        lr_neg: 0.0,
        anneal: Anneal { t_max_frac: 0.7, t_min_frac: 0.02 },
        noising: NoisingKind::InversionPredicted,
        tau_interval: [100, 300],
        seed,
        ..Default::default()
    }
}
