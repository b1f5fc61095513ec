//! Run artifacts: metrics and timing CSVs, final-state JSON, and atomic
//! file replacement.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use psd_core::distill::StepRecord;

use crate::config::RunMode;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_STATE_FILE: &str = "final_state.json";
pub const CONFIG_FILE: &str = "config_resolved.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_header(heldout: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "iter", "t", "camera", "r_win", "r_lose", "delta_r", "beta_r", "pref_weight", "norm_gen", "norm_cls", "norm_pref",
        "norm_q_dropped", "reward_target",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=heldout).map(|k| format!("reward_heldout_{k}")));
    h
}

pub fn metrics_csv(records: &[StepRecord], heldout: usize) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(metrics_header(heldout))?;
    for r in records {
        let mut row = vec![r.iter.to_string(), r.t.to_string(), r.camera.to_string()];
        row.extend(
            [r.r_win, r.r_lose, r.delta_r, r.beta_r, r.pref_weight, r.norm_gen, r.norm_cls, r.norm_pref, r.norm_q_dropped, r.reward_target]
                .into_iter()
                .chain(r.reward_heldout.iter().copied())
                .map(fmt_f64),
        );
        w.write_record(row)?;
    }
    Ok(w.into_inner()?)
}

pub fn timing_csv(timings: &[Duration]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iter", "seconds"])?;
    for (i, d) in timings.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(d.as_secs_f64())])?;
    }
    Ok(w.into_inner()?)
}

pub fn trajectory_csv(latents: &[nalgebra::DVector<f64>]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = latents.first().map_or(0, |l| l.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(header)?;
    for (i, l) in latents.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(l.iter().map(|v| fmt_f64(*v)));
        w.write_record(row)?;
    }
    Ok(w.into_inner()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub run_id: String,
    pub mode: RunMode,
    pub config_hash: String,
    pub model_hash: String,
    pub schedule_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub theta: Vec<f64>,
    pub neg: Vec<f64>,
    pub initial_reward_target: f64,
    pub initial_reward_heldout: Vec<f64>,
    pub final_reward_target: f64,
    pub final_reward_heldout: Vec<f64>,
}

impl FinalState {
    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(FINAL_STATE_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// One parsed metrics row, as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub t: usize,
    pub pref_weight: f64,
    pub reward_target: f64,
    pub reward_heldout: Vec<f64>,
}

pub fn read_metrics(dir: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let path = dir.join(METRICS_FILE);
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).with_context(|| format!("{} lacks column {name}", path.display()));
    let (i_iter, i_t, i_w, i_target) = (col("iter")?, col("t")?, col("pref_weight")?, col("reward_target")?);
    let heldout: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("reward_heldout_")).map(|(i, _)| i).collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), line + 1))?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec[i].parse::<f64>().with_context(|| format!("{} row {} column {}", path.display(), line + 1, &header[i]))
        };
        let row = MetricsRow {
            iter: rec[i_iter].parse().with_context(|| format!("{} row {}", path.display(), line + 1))?,
            t: rec[i_t].parse().with_context(|| format!("{} row {}", path.display(), line + 1))?,
            pref_weight: num(i_w)?,
            reward_target: num(i_target)?,
            reward_heldout: heldout.iter().map(|&i| num(i)).collect::<anyhow::Result<_>>()?,
        };
        anyhow::ensure!(rows.last().is_none_or(|p: &MetricsRow| p.iter < row.iter), "{}: iterations out of order", path.display());
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_timings(dir: &Path) -> anyhow::Result<Vec<f64>> {
    let path = dir.join(TIMING_FILE);
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    r.records().map(|rec| Ok(rec?[1].parse::<f64>()?)).collect()
}
