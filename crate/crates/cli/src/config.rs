use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use skelgait::io::{content_hash, Provenance};
use skelgait::loss::FusionLossConfig;
use skelgait::net::ModelConfig;
use skelgait::pipeline::PipelineOptions;
use skelgait::protocol::{BatchPlan, Condition, Metric, OptimizerConfig, TrainConfig, View};
use skelgait::synth::{OcclusionModel, SynthConfig};

pub const CONFIG_ENV: &str = "SKELGAIT_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Defaults to the calibration named in the manifest.
    pub calibration: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: BatchPlan,
    pub loss: FusionLossConfig,
    pub optimizer: OptimizerConfig,
    pub freeze_bn: bool,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch: t.batch,
            loss: t.loss,
            optimizer: t.optimizer,
            freeze_bn: t.freeze_bn,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_ids: usize,
    pub conditions: Vec<Condition>,
    pub views: Vec<View>,
    pub reps: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub occlusion: OcclusionModel,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_ids: s.n_ids,
            conditions: s.conditions,
            views: s.views,
            reps: s.reps,
            min_frames: s.min_frames,
            max_frames: s.max_frames,
            occlusion: s.occlusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: Metric,
    pub gallery_condition: Condition,
    /// Gallery uses reps `0..gallery_reps` of the gallery condition.
    pub gallery_reps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { metric: Metric::Euclidean, gallery_condition: Condition::Lcl, gallery_reps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub pipeline: PipelineOptions,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            pipeline: PipelineOptions::default(),
            synth: SynthSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch.p < 2 || self.train.batch.k < 2 {
            bail!("train.batch: P and K must both be at least 2");
        }
        self.train.loss.validate()?;
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if self.synth.min_frames < 12 || self.synth.min_frames > self.synth.max_frames {
            bail!("synth frame bounds must satisfy 12 <= min_frames <= max_frames");
        }
        if self.eval.gallery_reps == 0 {
            bail!("eval.gallery_reps must be at least 1");
        }
        Ok(())
    }

    /// Hash of the resolved configuration, stamped on every artifact. The
    /// worker count and output directory do not change any output and are
    /// left out.
    pub fn provenance(&self) -> Provenance {
        let mut canonical = Self { workers: 1, ..self.clone() };
        canonical.paths.output_dir = None;
        Provenance::new(content_hash(canonical.to_toml().as_bytes()), self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch: self.train.batch,
            seed: self.seed,
            loss: self.train.loss,
            optimizer: self.train.optimizer,
            freeze_bn: self.train.freeze_bn,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_ids: self.synth.n_ids,
            conditions: self.synth.conditions.clone(),
            views: self.synth.views.clone(),
            reps: self.synth.reps,
            seed: self.seed,
            min_frames: self.synth.min_frames,
            max_frames: self.synth.max_frames,
            occlusion: self.synth.occlusion,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.paths.manifest.as_deref().context("no manifest path (set paths.manifest or --manifest)")
    }
}
