//! Dataset manifests, the sex-balanced subject split, P x K batch sampling,
//! training, embedding extraction and gallery/probe rank-1 evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CalibrationSet;
use crate::graph::{ChannelStats, GaitTensor};
use crate::io::Provenance;
use crate::loss::{EmbeddingBatch, FusionLossConfig};
use crate::net::{ForwardMode, GaitModel, NetError, ParamKind, Tape, Tensor};
use crate::pipeline::{read_records, records_to_tensors, PipelineError, PipelineOptions};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split needs at least 2 subjects of each sex, found {female} female and {male} male")]
    TooFewSubjects { female: usize, male: usize },
    #[error("batch plan: {0}")]
    BatchPlan(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite at iteration {iteration} on sequences {batch:?}")]
    NonFiniteLoss { iteration: usize, batch: Vec<usize> },
    #[error("train and test subjects overlap at {0}")]
    Overlap(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($name).to_lowercase())),
                }
            }
        }
    };
}

label_enum!(Condition {
    Lcl => "LCL",
    Bob => "BOB",
    Sob => "SOB",
    Lob => "LOB",
    Mcl => "MCL",
    Hcl => "HCL",
    MgS => "MG-S",
    MgD => "MG-D",
    MgT => "MG-T",
});

label_enum!(View {
    Deg0 => "0",
    T45 => "T45",
    Deg90 => "90",
    T135 => "T135",
    Deg180 => "180",
    T225 => "T225",
    Deg270 => "270",
    T315 => "T315",
});

label_enum!(Sex {
    Female => "F",
    Male => "M",
});

impl Condition {
    /// Occlusion multiplier used by the synthetic generator.
    pub fn severity(self) -> f64 {
        match self {
            Condition::Lcl => 1.0,
            Condition::Sob => 2.0,
            Condition::Bob => 3.0,
            Condition::Lob => 4.0,
            Condition::Mcl => 5.0,
            Condition::Hcl => 6.0,
            Condition::MgS | Condition::MgD | Condition::MgT => 7.0,
        }
    }
}

impl View {
    pub const STRAIGHT: [View; 4] = [View::Deg0, View::Deg90, View::Deg180, View::Deg270];

    /// Mean walking heading in degrees.
    pub fn degrees(self) -> f64 {
        View::ALL.iter().position(|v| *v == self).expect("listed") as f64 * 45.0
    }

    pub fn is_turning(self) -> bool {
        !View::STRAIGHT.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub id: usize,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub subject: usize,
    pub condition: Condition,
    pub view: View,
    #[serde(default)]
    pub rep: usize,
    pub frames: usize,
    /// Relative to the manifest's directory.
    pub path: String,
}

pub const MANIFEST_FORMAT: &str = "skelgait-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<String>,
    pub subjects: Vec<Subject>,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn new(subjects: Vec<Subject>, sequences: Vec<SequenceEntry>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            config_hash: None,
            seed: None,
            calibration: None,
            subjects,
            sequences,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.format != MANIFEST_FORMAT || self.version != 1 {
            return Err(ProtocolError::Manifest(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut ids: Vec<usize> = self.subjects.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ProtocolError::Manifest("duplicate subject id".into()));
        }
        if let Some(s) = self.sequences.iter().find(|s| ids.binary_search(&s.subject).is_err()) {
            return Err(ProtocolError::Manifest(format!("sequence {} names unknown subject {}", s.path, s.subject)));
        }
        Ok(())
    }

    /// Indices of sequences whose frame count lies outside `[min, max]`.
    pub fn frame_count_violations(&self, min: usize, max: usize) -> Vec<usize> {
        (0..self.sequences.len()).filter(|i| !(min..=max).contains(&self.sequences[*i].frames)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        let m: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProtocolError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn subject(&self, id: usize) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Gallery indices (`gallery_condition`, rep below `gallery_reps`) and
    /// probe indices (every other sequence) among `subjects`.
    pub fn gallery_probe(&self, subjects: &[usize], gallery_condition: Condition, gallery_reps: usize) -> (Vec<usize>, Vec<usize>) {
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        for (i, s) in self.sequences.iter().enumerate() {
            if !subjects.contains(&s.subject) {
                continue;
            }
            if s.condition == gallery_condition && s.rep < gallery_reps {
                gallery.push(i);
            } else {
                probes.push(i);
            }
        }
        (gallery, probes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn check_disjoint(&self) -> Result<(), ProtocolError> {
        match self.train.iter().find(|id| self.test.contains(id)) {
            Some(id) => Err(ProtocolError::Overlap(*id)),
            None => Ok(()),
        }
    }
}

/// Halves each sex independently after a seeded shuffle; an odd subject
/// goes to the training side.
pub fn split(manifest: &DatasetManifest, seed: u64) -> Result<Split, ProtocolError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_sex = |sex: Sex| {
        let mut ids: Vec<usize> = manifest.subjects.iter().filter(|s| s.sex == sex).map(|s| s.id).collect();
        ids.sort_unstable();
        ids
    };
    let (mut female, mut male) = (by_sex(Sex::Female), by_sex(Sex::Male));
    if female.len() < 2 || male.len() < 2 {
        return Err(ProtocolError::TooFewSubjects { female: female.len(), male: male.len() });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ids in [&mut female, &mut male] {
        ids.shuffle(&mut rng);
        let n_train = ids.len().div_ceil(2);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let s = Split { train, test, seed };
    s.check_disjoint()?;
    Ok(s)
}

/// `p` identities with `k` sequences each per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPlan {
    pub p: usize,
    pub k: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self { p: 8, k: 4 }
    }
}

impl BatchPlan {
    /// Identities with at least `k` sequences, in ascending order.
    fn eligible(&self, by_id: &BTreeMap<usize, Vec<usize>>) -> Vec<usize> {
        by_id.iter().filter(|(_, v)| v.len() >= self.k).map(|(id, _)| *id).collect()
    }

    pub fn validate(&self, by_id: &BTreeMap<usize, Vec<usize>>) -> Result<(), ProtocolError> {
        if self.p < 2 || self.k < 2 {
            return Err(ProtocolError::BatchPlan(format!("P={} K={}: both must be at least 2", self.p, self.k)));
        }
        let n = self.eligible(by_id).len();
        if n < self.p {
            return Err(ProtocolError::BatchPlan(format!("{n} identities have {} sequences, P={} needed", self.k, self.p)));
        }
        Ok(())
    }

    /// Sample indices grouped by identity: `p` distinct identities, `k`
    /// distinct sequences each.
    pub fn sample(&self, by_id: &BTreeMap<usize, Vec<usize>>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let ids = self.eligible(by_id);
        let mut out = Vec::with_capacity(self.p * self.k);
        for id in ids.choose_multiple(rng, self.p) {
            out.extend(by_id[id].choose_multiple(rng, self.k));
        }
        out
    }
}

/// One loaded recording ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the manifest's sequence list.
    pub seq: usize,
    pub subject: usize,
    pub condition: Condition,
    pub view: View,
    pub rep: usize,
    pub real: GaitTensor,
    pub pseudo: GaitTensor,
}

/// Loads the listed sequences. Recordings with fewer than two usable frames
/// are skipped with a warning.
pub fn load_samples(
    manifest: &DatasetManifest,
    base_dir: &Path,
    indices: &[usize],
    calib: &CalibrationSet,
    opts: &PipelineOptions,
    frames: usize,
) -> Result<Vec<Sample>, ProtocolError> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = &manifest.sequences[i];
        let path: PathBuf = base_dir.join(&e.path);
        let records = read_records(&path)?;
        match records_to_tensors(&records, calib, opts, frames)? {
            Some((real, pseudo)) => out.push(Sample {
                seq: i,
                subject: e.subject,
                condition: e.condition,
                view: e.view,
                rep: e.rep,
                real,
                pseudo,
            }),
            None => log::warn!("skipping {}: fewer than 2 usable frames", path.display()),
        }
    }
    Ok(out)
}

/// Per-channel statistics of the real and pseudo streams.
pub fn fit_standardizer(samples: &[Sample]) -> [ChannelStats; 2] {
    [ChannelStats::fit(samples.iter().map(|s| &s.real)), ChannelStats::fit(samples.iter().map(|s| &s.pseudo))]
}

/// Standardized `(N, 3, T, 16)` input tensors for the selected samples.
pub fn stack_inputs(samples: &[&Sample], std: &[ChannelStats; 2]) -> (Tensor<f32>, Tensor<f32>) {
    let stack = |pick: fn(&Sample) -> &GaitTensor, stats: &ChannelStats| {
        let frames = pick(samples[0]).frames;
        let mut data = Vec::with_capacity(samples.len() * 3 * frames * crate::skeleton::NUM_JOINTS);
        for s in samples {
            let mut t = pick(s).clone();
            stats.apply(&mut t);
            data.extend(t.values.iter().map(|v| *v as f32));
        }
        Tensor::new(&[samples.len(), 3, frames, crate::skeleton::NUM_JOINTS], data)
    };
    (stack(|s| &s.real, &std[0]), stack(|s| &s.pseudo, &std[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the iteration budget at which the step size is scaled.
    pub milestones: [f64; 2],
    pub decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, weight_decay: 0.0, milestones: [0.5, 0.75], decay: 0.1 }
    }
}

impl OptimizerConfig {
    /// Step size for 1-based `iteration` out of `total`.
    pub fn learning_rate_at(&self, iteration: usize, total: usize) -> f64 {
        let passed = self.milestones.iter().filter(|m| iteration > (*m * total as f64).floor() as usize).count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: BatchPlan,
    pub seed: u64,
    pub loss: FusionLossConfig,
    pub optimizer: OptimizerConfig,
    /// Normalize with running statistics instead of batch statistics.
    pub freeze_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: BatchPlan::default(),
            seed: 0,
            loss: FusionLossConfig::default(),
            optimizer: OptimizerConfig::default(),
            freeze_bn: false,
        }
    }
}

/// Runs SGD on `model` over `samples`, calling `progress(iteration, loss)`
/// after every step. Fits the input standardizer and adds arcface centers
/// when the model has none. Returns the per-iteration loss trace.
pub fn train(
    model: &mut GaitModel<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<(usize, f64)>, ProtocolError> {
    if samples.is_empty() {
        return Err(ProtocolError::EmptyTrainingSet);
    }
    cfg.loss.validate().map_err(NetError::from)?;
    let mut classes: Vec<usize> = samples.iter().map(|s| s.subject).collect();
    classes.sort_unstable();
    classes.dedup();
    let label_of = |subject: usize| classes.binary_search(&subject).expect("subject in class list");
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_id.entry(s.subject).or_default().push(i);
    }
    if cfg.iterations > 0 {
        cfg.batch.validate(&by_id)?;
    }
    model.standardizer = fit_standardizer(samples);
    let centers = match model.centers {
        Some(c) => c,
        None => model.add_arcface_head(classes.len(), cfg.seed),
    };
    let mut velocity: Vec<Vec<f32>> = model.store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mode = if cfg.freeze_bn { ForwardMode::FrozenBn } else { ForwardMode::Train };
    let lambda = cfg.loss.lambda as f32;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 1..=cfg.iterations {
        let batch = cfg.batch.sample(&by_id, &mut rng);
        let picked: Vec<&Sample> = batch.iter().map(|i| &samples[*i]).collect();
        let labels: Vec<usize> = picked.iter().map(|s| label_of(s.subject)).collect();
        let (fj, fa) = stack_inputs(&picked, &model.standardizer);

        let mut tape = Tape::new();
        let (j, a) = (tape.constant(fj), tape.constant(fa));
        let out = model.forward(&mut tape, j, a, mode)?;
        let tri = if cfg.loss.triplet.per_group {
            let groups = out.head.groups.clone();
            let mut sum = tape.batch_hard_triplet(groups[0], &labels, cfg.loss.triplet.margin)?;
            for g in &groups[1..] {
                let l = tape.batch_hard_triplet(*g, &labels, cfg.loss.triplet.margin)?;
                sum = tape.add(sum, l)?;
            }
            tape.scale(sum, 1.0 / groups.len() as f32)
        } else {
            tape.batch_hard_triplet(out.embedding(), &labels, cfg.loss.triplet.margin)?
        };
        let w = tape.param(&model.store, centers);
        let arc = tape.arcface(out.embedding(), w, &labels, cfg.loss.arcface.scale, cfg.loss.arcface.margin)?;
        let tri = tape.scale(tri, lambda);
        let arc = tape.scale(arc, 1.0 - lambda);
        let total = tape.add(tri, arc)?;
        let loss = tape.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(ProtocolError::NonFiniteLoss {
                iteration: it,
                batch: picked.iter().map(|s| s.seq).collect(),
            });
        }
        tape.backward(total)?;
        model.store.zero_grads();
        tape.accumulate_param_grads(&mut model.store);

        let lr = cfg.optimizer.learning_rate_at(it, cfg.iterations) as f32;
        let mu = cfg.optimizer.momentum as f32;
        let wd = cfg.optimizer.weight_decay as f32;
        for (p, v) in model.store.iter_mut().zip(velocity.iter_mut()) {
            if p.kind == ParamKind::Buffer {
                continue;
            }
            let grads = p.grad.data().to_vec();
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(grads).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        trace.push((it, loss));
        progress(it, loss);
    }
    Ok(trace)
}

/// Trailing moving average over `window` entries, aligned with the input.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Evaluation-mode embeddings for `samples`, in input order. Work is split
/// into contiguous chunks over `workers` threads; since every sample is
/// processed independently the result does not depend on the worker count.
pub fn extract(model: &GaitModel<f32>, samples: &[Sample], workers: usize) -> Result<EmbeddingBatch, NetError> {
    const CHUNK: usize = 16;
    let dim = model.config.embedding_len();
    let chunks: Vec<&[Sample]> = samples.chunks(CHUNK).collect();
    let run = |chunk: &[Sample]| -> Result<Vec<f32>, NetError> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (fj, fa) = stack_inputs(&refs, &model.standardizer);
        Ok(model.embed(fj, fa)?.into_data())
    };
    let workers = workers.max(1).min(chunks.len().max(1));
    let mut results: Vec<Option<Result<Vec<f32>, NetError>>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, c) in results.iter_mut().zip(&chunks) {
            *slot = Some(run(c));
        }
    } else {
        std::thread::scope(|scope| {
            for (w, slots) in results.chunks_mut(chunks.len().div_ceil(workers)).enumerate() {
                let start = w * chunks.len().div_ceil(workers);
                let chunks = &chunks;
                let run = &run;
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(run(chunks[start + k]));
                    }
                });
            }
        });
    }
    let mut values = Vec::with_capacity(samples.len() * dim);
    for r in results {
        values.extend(r.expect("every chunk ran")?.into_iter().map(f64::from));
    }
    Ok(EmbeddingBatch {
        dim,
        values,
        ids: samples.iter().map(|s| s.subject).collect(),
        views: samples.iter().map(|s| s.view).collect(),
        conditions: samples.iter().map(|s| s.condition).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => crate::loss::euclidean(a, b),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub condition: Condition,
    pub view: View,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub cells: Vec<CellResult>,
    pub per_condition: Vec<(Condition, f64)>,
    pub overall: f64,
}

impl EvalResult {
    pub fn cell(&self, condition: Condition, view: View) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.condition == condition && c.view == view)
    }

    pub fn condition_mean(&self, condition: Condition) -> Option<f64> {
        self.per_condition.iter().find(|(c, _)| *c == condition).map(|(_, a)| *a)
    }

    /// Condition rows by view columns, with a mean column and a mean row.
    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let views: Vec<View> = View::ALL.iter().copied().filter(|v| self.cells.iter().any(|c| c.view == *v)).collect();
        let mut out = provenance.comment_line("eval");
        out.push_str("condition");
        for v in &views {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(",mean\n");
        for (cond, mean) in &self.per_condition {
            out.push_str(cond.as_str());
            for v in &views {
                match self.cell(*cond, *v) {
                    Some(c) => out.push_str(&format!(",{:.4}", c.accuracy)),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{mean:.4}\n"));
        }
        out.push_str("mean");
        for _ in &views {
            out.push(',');
        }
        out.push_str(&format!(",{:.4}\n", self.overall));
        out
    }
}

/// Nearest gallery identity for `probe`, ignoring gallery entries recorded
/// at `exclude_view`. Distance ties resolve to the smaller identity, so the
/// answer does not depend on gallery order.
pub fn nearest_identity(gallery: &EmbeddingBatch, probe: &[f64], exclude_view: Option<View>, metric: Metric) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..gallery.len() {
        if Some(gallery.views[i]) == exclude_view {
            continue;
        }
        let d = metric.distance(gallery.row(i), probe);
        let cand = (d, gallery.ids[i]);
        if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
            best = Some(cand);
        }
    }
    best.map(|b| b.1)
}

/// Rank-1 accuracy of every probe against the gallery with same-view gallery
/// entries excluded.
pub fn evaluate(gallery: &EmbeddingBatch, probes: &EmbeddingBatch, metric: Metric) -> EvalResult {
    let mut cells: BTreeMap<(Condition, View), (usize, usize)> = BTreeMap::new();
    for i in 0..probes.len() {
        let id = probes.ids[i];
        if !gallery.ids.contains(&id) {
            log::warn!("probe {i}: identity {id} is absent from the gallery");
        }
        let predicted = nearest_identity(gallery, probes.row(i), Some(probes.views[i]), metric);
        let e = cells.entry((probes.conditions[i], probes.views[i])).or_default();
        e.1 += 1;
        if predicted == Some(id) {
            e.0 += 1;
        }
    }
    let cells: Vec<CellResult> = cells
        .into_iter()
        .map(|((condition, view), (correct, total))| CellResult {
            condition,
            view,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    let mut per_condition = Vec::new();
    for cond in Condition::ALL {
        let accs: Vec<f64> = cells.iter().filter(|c| c.condition == *cond).map(|c| c.accuracy).collect();
        if !accs.is_empty() {
            per_condition.push((*cond, accs.iter().sum::<f64>() / accs.len() as f64));
        }
    }
    let overall = if cells.is_empty() { 0.0 } else { cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64 };
    EvalResult { cells, per_condition, overall }
}

/// Comma-separated embeddings: subject, condition, view, then the group
/// columns `<group>.<k>`.
pub fn embeddings_csv(batch: &EmbeddingBatch, group_names: &[&str], provenance: &Provenance) -> String {
    let per = batch.dim / group_names.len().max(1);
    let mut out = provenance.comment_line("embeddings");
    out.push_str("subject,condition,view");
    for g in group_names {
        for k in 0..per {
            out.push_str(&format!(",{g}.{k}"));
        }
    }
    out.push('\n');
    for i in 0..batch.len() {
        out.push_str(&format!("{},{},{}", batch.ids[i], batch.conditions[i], batch.views[i]));
        for v in batch.row(i) {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}
