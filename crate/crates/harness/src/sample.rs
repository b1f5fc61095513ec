//! Deterministic DDIM sampling from a configured model.

use std::path::Path;

use nalgebra::DVector;

use psd_core::schedule::{ddim_step, ddim_timesteps, NoisyState};
use psd_core::score::{cfg_eps, ScoreModel};
use psd_core::streams::{standard_normal, substream, Substream};

use crate::config::RunConfig;
use crate::output::{trajectory_csv, write_atomic};

pub const SAMPLES_FILE: &str = "samples.csv";

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub count: usize,
    pub steps: usize,
    /// Guidance scale against the configured negative embedding.
    pub gamma: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { count: 1000, steps: 50, gamma: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub samples: Vec<DVector<f64>>,
    pub sample_mean: DVector<f64>,
    /// Mean of the model conditioned on the prompt.
    pub model_mean: DVector<f64>,
}

/// Draws `count` samples, each from its own starting noise on the
/// `NoiseA` stream of the configured seed.
pub fn sample(config: &RunConfig, opts: &SampleOptions) -> anyhow::Result<SampleOutcome> {
    anyhow::ensure!(opts.count > 0, "sample count must be positive");
    let r = config.resolve()?;
    let steps = ddim_timesteps(&r.schedule, opts.steps);
    let mut rng = substream(config.distill.seed, Substream::NoiseA);
    let dim = r.model.data_dim();
    let mut samples = Vec::with_capacity(opts.count);
    for _ in 0..opts.count {
        let mut state = NoisyState::new(standard_normal(&mut rng, dim), r.schedule.num_steps());
        for next in &steps[1..] {
            let eps = cfg_eps(&r.model, &state, &r.prompt, &r.negative, opts.gamma, &r.schedule)?;
            state = ddim_step(&state, &eps, *next, &r.schedule)?;
        }
        samples.push(state.x);
    }
    let sample_mean = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / opts.count as f64;
    Ok(SampleOutcome { sample_mean, model_mean: r.model.mean(&r.prompt), samples })
}

pub fn write_samples(path: &Path, samples: &[DVector<f64>]) -> anyhow::Result<()> {
    write_atomic(path, &trajectory_csv(samples)?)
}
