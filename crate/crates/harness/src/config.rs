//! Run configuration: one JSON document per run, resolved into the core
//! objects it describes.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use psd_core::distill::{DistillConfig, RewardSet};
use psd_core::representation::Representation;
use psd_core::rewards::{RewardKind, RewardSpec};
use psd_core::schedule::{Schedule, ScheduleKind};
use psd_core::score::{Embedding, GmmParams, GmmScoreModel, ScoreModel};
use psd_core::streams::{standard_normal, substream, Substream};
use psd_core::tasks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Optimize a representation (and the negative embedding) for `num_iters` steps.
    #[default]
    Distill,
    /// Parameterized-latent generation from a fresh `N(0, I)` latent.
    LatentGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleKind::VariancePreserving, num_steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum ModelSource {
    Standard,
    /// A `GmmParams` JSON file; relative paths resolve against the config file.
    File { path: PathBuf },
    Inline { params: GmmParams },
    Random { seed: u64, components: usize, data_dim: usize, embed_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBlock {
    pub kind: RewardKind,
    /// Row-major `d x d_e` matrix.
    pub target_map: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub scale: f64,
    #[serde(default = "one")]
    pub bandwidth: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum RewardsSource {
    Standard,
    Inline { target: RewardBlock, heldout: Vec<RewardBlock> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum RepresentationSpec {
    Standard,
    BlendedHalves { theta: Vec<f64>, blend_weights: Vec<f64> },
    /// Cameras are row-major `d x d_theta` matrices.
    MultiView { theta: Vec<f64>, cameras: Vec<Vec<Vec<f64>>> },
    /// Without `theta` the latent is drawn from `N(0, I)` on the init stream.
    RawLatent {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub model: ModelSource,
    pub rewards: RewardsSource,
    pub representation: RepresentationSpec,
    pub prompt: Vec<f64>,
    /// Initial negative embedding.
    pub negative: Vec<f64>,
    pub distill: DistillConfig,
}

impl RunConfig {
    /// The standard quadratic task with default settings.
    pub fn standard(run_id: &str, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_id: run_id.to_string(),
            output_dir: output_dir.into(),
            mode: RunMode::Distill,
            schedule: ScheduleSpec::default(),
            model: ModelSource::Standard,
            rewards: RewardsSource::Standard,
            representation: RepresentationSpec::Standard,
            prompt: tasks::standard_prompt().v.iter().copied().collect(),
            negative: tasks::standard_negative().v.iter().copied().collect(),
            distill: DistillConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative model paths are made relative to its
    /// directory and must exist.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config = Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let ModelSource::File { path: model_path } = &mut config.model {
            if model_path.is_relative() {
                *model_path = base.join(&*model_path);
            }
            ensure!(model_path.exists(), "model file {} does not exist", model_path.display());
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, with the run id and output
    /// directory blanked so that only settings that change results count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_id.clear();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn resolve(&self) -> anyhow::Result<Resolved> {
        self.distill.validate()?;
        let sched = &self.schedule;
        let schedule = Schedule::build(sched.kind, sched.num_steps, sched.beta_min, sched.beta_max)?;
        let model = match &self.model {
            ModelSource::Standard => tasks::standard_model()?,
            ModelSource::File { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
                GmmScoreModel::from_params(&serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?)?
            }
            ModelSource::Inline { params } => GmmScoreModel::from_params(params)?,
            ModelSource::Random { seed, components, data_dim, embed_dim } => {
                let mut rng = substream(*seed, Substream::Init);
                GmmScoreModel::random(&mut rng, *components, *data_dim, *embed_dim)?
            }
        };
        let rewards = match &self.rewards {
            RewardsSource::Standard => tasks::standard_rewards()?,
            RewardsSource::Inline { target, heldout } => RewardSet {
                target: reward_from(target)?,
                heldout: heldout.iter().map(reward_from).collect::<anyhow::Result<_>>()?,
            },
        };
        let (d, de) = (model.data_dim(), model.embed_dim());
        ensure!(self.prompt.len() == de, "prompt has {} entries, model embeds {de}", self.prompt.len());
        ensure!(self.negative.len() == de, "negative embedding has {} entries, model embeds {de}", self.negative.len());
        for r in std::iter::once(&rewards.target).chain(&rewards.heldout) {
            ensure!(r.data_dim() == d && r.target_map().ncols() == de, "reward shape does not match the model");
        }
        let representation = match &self.representation {
            RepresentationSpec::Standard => tasks::standard_representation(),
            RepresentationSpec::BlendedHalves { theta, blend_weights } => {
                Representation::blended_halves(DVector::from_vec(theta.clone()), blend_weights)?
            }
            RepresentationSpec::MultiView { theta, cameras } => Representation::multi_view(
                DVector::from_vec(theta.clone()),
                cameras.iter().map(|c| matrix_from_rows(c)).collect::<anyhow::Result<_>>()?,
            )?,
            RepresentationSpec::RawLatent { theta: Some(theta) } => Representation::raw_latent(DVector::from_vec(theta.clone())),
            RepresentationSpec::RawLatent { theta: None } => {
                Representation::raw_latent(standard_normal(&mut substream(self.distill.seed, Substream::Init), d))
            }
        };
        ensure!(representation.data_dim() == d, "representation renders {} values, model expects {d}", representation.data_dim());
        let model_hash = sha256_hex(serde_json::to_string(&model.to_params())?.as_bytes());
        let schedule_hash = sha256_hex(serde_json::to_string(&self.schedule)?.as_bytes());
        Ok(Resolved {
            schedule,
            model,
            rewards,
            representation,
            prompt: Embedding::positive(DVector::from_vec(self.prompt.clone())),
            negative: Embedding::negative(DVector::from_vec(self.negative.clone())),
            model_hash,
            schedule_hash,
        })
    }
}

/// Core objects built from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub schedule: Schedule,
    pub model: GmmScoreModel,
    pub rewards: RewardSet,
    pub representation: Representation,
    pub prompt: Embedding,
    pub negative: Embedding,
    pub model_hash: String,
    pub schedule_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("ragged matrix rows");
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

fn reward_from(block: &RewardBlock) -> anyhow::Result<RewardSpec> {
    Ok(RewardSpec::new(
        block.kind,
        matrix_from_rows(&block.target_map)?,
        DVector::from_vec(block.offset.clone()),
        block.scale,
        block.bandwidth,
    )?)
}
