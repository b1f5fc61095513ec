//! Cross-product experiment matrices over a base run configuration.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use psd_core::distill::{BetaRMode, Method, NoisingKind};

use crate::config::RunConfig;
use crate::output::{fmt_f64, write_atomic};
use crate::run::{execute, RunSummary};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// Axes to sweep. An empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub method: Vec<Method>,
    pub beta_r_mode: Vec<BetaRMode>,
    pub lr_theta: Vec<f64>,
    pub lr_neg: Vec<f64>,
    pub neg_update_interval: Vec<usize>,
    pub noising: Vec<NoisingKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub grid: Grid,
}

impl MatrixConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading matrix {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing matrix {}", path.display()))
    }

    pub fn root(&self) -> PathBuf {
        self.base.run_dir()
    }

    /// The configuration of every cell, without seeds.
    pub fn cells(&self) -> Vec<RunConfig> {
        fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let g = &self.grid;
        let d = &self.base.distill;
        let mut cells = Vec::new();
        for method in axis(&g.method, d.method) {
            for beta_r_mode in axis(&g.beta_r_mode, d.beta_r_mode) {
                for lr_theta in axis(&g.lr_theta, d.lr_theta) {
                    for lr_neg in axis(&g.lr_neg, d.lr_neg) {
                        for neg_update_interval in axis(&g.neg_update_interval, d.neg_update_interval) {
                            for noising in axis(&g.noising, d.noising) {
                                let mut c = self.base.clone();
                                c.distill.method = method;
                                c.distill.beta_r_mode = beta_r_mode;
                                c.distill.lr_theta = lr_theta;
                                c.distill.lr_neg = lr_neg;
                                c.distill.neg_update_interval = neg_update_interval;
                                c.distill.noising = noising;
                                cells.push(c);
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.grid.seeds.is_empty() {
            vec![self.base.distill.seed]
        } else {
            self.grid.seeds.clone()
        }
    }

    /// Every run of the matrix, placed at `root/cell_XXX/seed_S`.
    pub fn runs(&self) -> Vec<(usize, RunConfig)> {
        let root = self.root();
        let seeds = self.seeds();
        let mut out = Vec::new();
        for (i, cell) in self.cells().into_iter().enumerate() {
            for &seed in &seeds {
                let mut c = cell.clone();
                c.distill.seed = seed;
                c.output_dir = root.join(cell_name(i));
                c.run_id = format!("seed_{seed}");
                out.push((i, c));
            }
        }
        out
    }
}

pub fn cell_name(index: usize) -> String {
    format!("cell_{index:03}")
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub name: String,
    pub config: RunConfig,
    pub runs: Vec<RunSummary>,
    pub failed: usize,
}

impl CellSummary {
    pub fn mean_initial_target(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.initial_reward_target))
    }

    pub fn mean_final_target(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_reward_target))
    }

    pub fn mean_final_heldout(&self, k: usize) -> f64 {
        mean(self.runs.iter().map(|r| r.final_reward_heldout[k]))
    }

    pub fn mean_iter_seconds(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.mean_iter_seconds))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug)]
pub struct RunFailure {
    pub cell: String,
    pub seed: u64,
    pub error: anyhow::Error,
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub root: PathBuf,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<RunFailure>,
}

/// Runs the whole matrix on `jobs` worker threads (all cores when `None`),
/// then writes `summary.csv` and, if anything failed, `failures.csv`.
pub fn ablate(matrix: &MatrixConfig, jobs: Option<usize>) -> anyhow::Result<AblateOutcome> {
    let runs = matrix.runs();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build()?;
    let results: Vec<(usize, u64, anyhow::Result<RunSummary>)> =
        pool.install(|| runs.par_iter().map(|(i, c)| (*i, c.distill.seed, execute(c))).collect());

    let mut cells: Vec<CellSummary> = matrix
        .cells()
        .into_iter()
        .enumerate()
        .map(|(i, config)| CellSummary { name: cell_name(i), config, runs: Vec::new(), failed: 0 })
        .collect();
    let mut failures = Vec::new();
    for (i, seed, res) in results {
        match res {
            Ok(summary) => cells[i].runs.push(summary),
            Err(error) => {
                cells[i].failed += 1;
                failures.push(RunFailure { cell: cell_name(i), seed, error });
            }
        }
    }
    let root = matrix.root();
    write_atomic(&root.join(SUMMARY_FILE), &summary_csv(&cells)?)?;
    if !failures.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "seed", "error"])?;
        for f in &failures {
            w.write_record([f.cell.clone(), f.seed.to_string(), format!("{:#}", f.error)])?;
        }
        write_atomic(&root.join(FAILURES_FILE), &w.into_inner()?)?;
    }
    Ok(AblateOutcome { root, cells, failures })
}

fn summary_csv(cells: &[CellSummary]) -> anyhow::Result<Vec<u8>> {
    let heldout = cells.iter().flat_map(|c| c.runs.first()).map(|r| r.final_reward_heldout.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "cell", "method", "beta_r_mode", "lr_theta", "lr_neg", "neg_update_interval", "noising", "runs", "failed",
        "mean_initial_reward_target", "mean_final_reward_target",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=heldout).map(|k| format!("mean_final_reward_heldout_{k}")));
    header.push("mean_iter_seconds".into());
    w.write_record(&header)?;
    for c in cells {
        let d = &c.config.distill;
        let mut row = vec![
            c.name.clone(),
            json_name(&d.method),
            json_name(&d.beta_r_mode),
            fmt_f64(d.lr_theta),
            fmt_f64(d.lr_neg),
            d.neg_update_interval.to_string(),
            json_name(&d.noising),
            c.runs.len().to_string(),
            c.failed.to_string(),
            fmt_f64(c.mean_initial_target()),
            fmt_f64(c.mean_final_target()),
        ];
        row.extend((0..heldout).map(|k| fmt_f64(if c.runs.is_empty() { f64::NAN } else { c.mean_final_heldout(k) })));
        row.push(fmt_f64(c.mean_iter_seconds()));
        w.write_record(row)?;
    }
    Ok(w.into_inner()?)
}

fn json_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}
