//! A single configured run and its artifacts.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;

use psd_core::distill::{image_gen_run, rewards_of, run, OptimState, Problem, StepRecord};
use psd_core::representation::Representation;
use psd_core::streams::RunStreams;

use crate::config::{RunConfig, RunMode};
use crate::output::{self, FinalState};

/// What a finished run produced, before anything is written.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub timings: Vec<Duration>,
    pub latents: Vec<nalgebra::DVector<f64>>,
    pub final_state: FinalState,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub iterations: usize,
    pub initial_reward_target: f64,
    pub final_reward_target: f64,
    pub final_reward_heldout: Vec<f64>,
    pub mean_iter_seconds: f64,
}

pub fn compute(config: &RunConfig) -> anyhow::Result<RunResult> {
    let resolved = config.resolve()?;
    let problem = Problem {
        model: &resolved.model,
        rewards: &resolved.rewards,
        y: &resolved.prompt,
        schedule: &resolved.schedule,
    };
    let mut streams = RunStreams::new(config.distill.seed);
    let (records, timings, latents, theta, neg, initial) = match config.mode {
        RunMode::Distill => {
            let state = OptimState::new(resolved.representation.clone(), resolved.negative.clone());
            let out = run(state, &config.distill, &problem, &mut streams)?;
            let initial = (out.initial_reward_target, out.initial_reward_heldout);
            let fs = out.final_state;
            (out.records, out.timings, Vec::new(), fs.rep.theta, fs.neg.v, initial)
        }
        RunMode::LatentGen => {
            let out = image_gen_run(&config.distill, &problem, &resolved.negative, &mut streams)?;
            let initial = rewards_of(&Representation::raw_latent(out.latents[0].clone()), &resolved.rewards, &resolved.prompt)?;
            let theta = out.latents.last().expect("initial latent is always present").clone();
            (out.records, out.timings, out.latents, theta, resolved.negative.v.clone(), initial)
        }
    };
    let (final_reward_target, final_reward_heldout) = match records.last() {
        Some(r) => (r.reward_target, r.reward_heldout.clone()),
        None => initial.clone(),
    };
    let final_state = FinalState {
        run_id: config.run_id.clone(),
        mode: config.mode,
        config_hash: config.hash(),
        model_hash: resolved.model_hash,
        schedule_hash: resolved.schedule_hash,
        seed: config.distill.seed,
        iterations: records.len(),
        theta: theta.iter().copied().collect(),
        neg: neg.iter().copied().collect(),
        initial_reward_target: initial.0,
        initial_reward_heldout: initial.1,
        final_reward_target,
        final_reward_heldout,
    };
    Ok(RunResult { records, timings, latents, final_state })
}

/// Runs `config` and writes its artifacts under `output_dir/run_id`.
pub fn execute(config: &RunConfig) -> anyhow::Result<RunSummary> {
    let result = compute(config)?;
    let dir = config.run_dir();
    let heldout = result.final_state.final_reward_heldout.len();
    output::write_atomic(&dir.join(output::CONFIG_FILE), config.to_json().as_bytes())?;
    output::write_atomic(&dir.join(output::METRICS_FILE), &output::metrics_csv(&result.records, heldout)?)?;
    output::write_atomic(&dir.join(output::TIMING_FILE), &output::timing_csv(&result.timings)?)?;
    if !result.latents.is_empty() {
        output::write_atomic(&dir.join(output::TRAJECTORY_FILE), &output::trajectory_csv(&result.latents)?)?;
    }
    let state_json = serde_json::to_string_pretty(&result.final_state)?;
    output::write_atomic(&dir.join(output::FINAL_STATE_FILE), state_json.as_bytes())?;
    let total: f64 = result.timings.iter().map(Duration::as_secs_f64).sum();
    Ok(RunSummary {
        run_dir: dir,
        config_hash: result.final_state.config_hash.clone(),
        iterations: result.records.len(),
        initial_reward_target: result.final_state.initial_reward_target,
        final_reward_target: result.final_state.final_reward_target,
        final_reward_heldout: result.final_state.final_reward_heldout.clone(),
        mean_iter_seconds: if result.timings.is_empty() { 0.0 } else { total / result.timings.len() as f64 },
    })
}
