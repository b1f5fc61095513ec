//! Aggregation over finished run directories: mean reward curves, end
//! points, and paired differences against a second group of runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::bail;
use serde::Serialize;

use psd_core::stats::{bootstrap_mean_ci, moving_average, nondecreasing_fraction, BootstrapCi};

use crate::output::{fmt_f64, read_metrics, write_atomic, FinalState, MetricsRow};

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub runs: Vec<PathBuf>,
    /// Baseline runs, paired with `runs` by seed.
    pub against: Vec<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    pub window: usize,
    pub level: f64,
    pub resamples: usize,
}

impl ReportOptions {
    pub fn new(runs: Vec<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self { runs, against: Vec::new(), out: out.into(), force: false, window: 10, level: 0.95, resamples: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub state: FinalState,
    pub metrics: Vec<MetricsRow>,
}

pub fn load_run(dir: &Path) -> anyhow::Result<LoadedRun> {
    let state = FinalState::read(dir)?;
    let metrics = read_metrics(dir)?;
    if metrics.len() != state.iterations {
        bail!("{}: {} metrics rows for {} iterations", dir.display(), metrics.len(), state.iterations);
    }
    Ok(LoadedRun { dir: dir.to_path_buf(), state, metrics })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairedStats {
    pub pairs: usize,
    pub seeds: Vec<u64>,
    /// `final_reward_target(run) - final_reward_target(baseline)` per seed.
    pub differences: Vec<f64>,
    pub ci: BootstrapCi,
    pub wins: usize,
    pub heldout_mean_differences: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCurve {
    pub runs: usize,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Fraction of non-decreasing steps of the smoothed mean curve.
    pub smoothed_trend: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportOutcome {
    pub problems: Vec<String>,
    pub curve: Option<GroupCurve>,
    pub against_curve: Option<GroupCurve>,
    pub paired: Option<PairedStats>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no run directories given")]
    NoInputs,
    #[error("runs disagree on {what}: {first} vs {other} ({dir}); pass --force to aggregate anyway")]
    HashMismatch { what: &'static str, first: String, other: String, dir: String },
}

fn load_all(dirs: &[PathBuf], problems: &mut Vec<String>) -> Vec<LoadedRun> {
    dirs.iter()
        .filter_map(|d| match load_run(d) {
            Ok(r) => Some(r),
            Err(e) => {
                problems.push(format!("{e:#}"));
                None
            }
        })
        .collect()
}

fn check_hashes(runs: &[&LoadedRun]) -> Result<(), ReportError> {
    let Some(first) = runs.first() else { return Ok(()) };
    for r in runs {
        for (what, a, b) in [
            ("model hash", &first.state.model_hash, &r.state.model_hash),
            ("schedule hash", &first.state.schedule_hash, &r.state.schedule_hash),
        ] {
            if a != b {
                return Err(ReportError::HashMismatch { what, first: a.clone(), other: b.clone(), dir: r.dir.display().to_string() });
            }
        }
    }
    Ok(())
}

fn group_curve(runs: &[LoadedRun], window: usize) -> Option<GroupCurve> {
    let len = runs.iter().map(|r| r.metrics.len()).min()?;
    let raw: Vec<f64> = (0..len).map(|i| runs.iter().map(|r| r.metrics[i].reward_target).sum::<f64>() / runs.len() as f64).collect();
    let smoothed = moving_average(&raw, window);
    Some(GroupCurve { runs: runs.len(), smoothed_trend: nondecreasing_fraction(&smoothed), raw, smoothed })
}

fn paired(runs: &[LoadedRun], base: &[LoadedRun], opts: &ReportOptions, problems: &mut Vec<String>) -> Option<PairedStats> {
    let by_seed: BTreeMap<u64, &LoadedRun> = base.iter().map(|r| (r.state.seed, r)).collect();
    let mut seeds = Vec::new();
    let mut differences = Vec::new();
    let mut heldout: Vec<Vec<f64>> = Vec::new();
    for r in runs {
        let Some(b) = by_seed.get(&r.state.seed) else {
            problems.push(format!("{}: no baseline run with seed {}", r.dir.display(), r.state.seed));
            continue;
        };
        seeds.push(r.state.seed);
        differences.push(r.state.final_reward_target - b.state.final_reward_target);
        heldout.push(r.state.final_reward_heldout.iter().zip(&b.state.final_reward_heldout).map(|(x, y)| x - y).collect());
    }
    if differences.is_empty() {
        return None;
    }
    let k = heldout.iter().map(Vec::len).min().unwrap_or(0);
    let heldout_mean_differences = (0..k).map(|j| heldout.iter().map(|h| h[j]).sum::<f64>() / heldout.len() as f64).collect();
    Some(PairedStats {
        pairs: differences.len(),
        seeds,
        wins: differences.iter().filter(|d| **d > 0.0).count(),
        ci: bootstrap_mean_ci(&differences, opts.level, opts.resamples, 0),
        differences,
        heldout_mean_differences,
    })
}

fn curves_csv(a: &Option<GroupCurve>, b: &Option<GroupCurve>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iter", "mean_raw", "mean_smoothed"];
    if b.is_some() {
        header.extend(["against_mean_raw", "against_mean_smoothed"]);
    }
    w.write_record(&header)?;
    let len = a.as_ref().map_or(0, |c| c.raw.len()).max(b.as_ref().map_or(0, |c| c.raw.len()));
    let cell = |c: &Option<GroupCurve>, i: usize, smooth: bool| {
        c.as_ref()
            .and_then(|c| if smooth { c.smoothed.get(i) } else { c.raw.get(i) })
            .map_or(String::new(), |v| fmt_f64(*v))
    };
    for i in 0..len {
        let mut row = vec![i.to_string(), cell(a, i, false), cell(a, i, true)];
        if b.is_some() {
            row.extend([cell(b, i, false), cell(b, i, true)]);
        }
        w.write_record(row)?;
    }
    Ok(w.into_inner()?)
}

fn endpoints_csv(groups: &[(&str, &[LoadedRun])]) -> anyhow::Result<Vec<u8>> {
    let k = groups.iter().flat_map(|(_, rs)| rs.iter()).map(|r| r.state.final_reward_heldout.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> =
        ["group", "run_dir", "seed", "iterations", "initial_reward_target", "final_reward_target"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=k).map(|j| format!("final_reward_heldout_{j}")));
    w.write_record(&header)?;
    for (name, runs) in groups {
        for r in *runs {
            let mut row = vec![
                name.to_string(),
                r.dir.display().to_string(),
                r.state.seed.to_string(),
                r.state.iterations.to_string(),
                fmt_f64(r.state.initial_reward_target),
                fmt_f64(r.state.final_reward_target),
            ];
            row.extend((0..k).map(|j| r.state.final_reward_heldout.get(j).map_or(String::new(), |v| fmt_f64(*v))));
            w.write_record(row)?;
        }
    }
    Ok(w.into_inner()?)
}

/// Loads the runs, writes `curves.csv`, `endpoints.csv` and `report.json`
/// (plus `paired.json` with a baseline group) under `opts.out`. Unreadable
/// runs are skipped and listed in `problems`.
pub fn report(opts: &ReportOptions) -> anyhow::Result<ReportOutcome> {
    if opts.runs.is_empty() {
        return Err(ReportError::NoInputs.into());
    }
    let mut problems = Vec::new();
    let runs = load_all(&opts.runs, &mut problems);
    let base = load_all(&opts.against, &mut problems);
    if !opts.force {
        let all: Vec<&LoadedRun> = runs.iter().chain(&base).collect();
        check_hashes(&all)?;
    }
    let curve = group_curve(&runs, opts.window);
    let against_curve = if opts.against.is_empty() { None } else { group_curve(&base, opts.window) };
    let paired = if opts.against.is_empty() { None } else { paired(&runs, &base, opts, &mut problems) };

    write_atomic(&opts.out.join("curves.csv"), &curves_csv(&curve, &against_curve)?)?;
    write_atomic(&opts.out.join("endpoints.csv"), &endpoints_csv(&[("runs", &runs), ("against", &base)])?)?;
    if let Some(p) = &paired {
        write_atomic(&opts.out.join("paired.json"), serde_json::to_string_pretty(p)?.as_bytes())?;
    }
    let outcome = ReportOutcome { problems, curve, against_curve, paired };
    write_atomic(&opts.out.join("report.json"), serde_json::to_string_pretty(&outcome)?.as_bytes())?;
    Ok(outcome)
}
