use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use skelgait::geometry::CalibrationSet;
use skelgait::io::{write_loss_trace, write_sequence};
use skelgait::jrpm::PyramidSpec;
use skelgait::net::{checkpoint, count_parameters, GaitModel};
use skelgait::pipeline::{fuse_records, read_records};
use skelgait::protocol::{self, embeddings_csv, evaluate, extract, load_samples, DatasetManifest, Sample};
use skelgait::synth::build_synthetic_manifest;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_calibration(cfg: &RunConfig, manifest: Option<(&DatasetManifest, &Path)>) -> Result<CalibrationSet> {
    let path = match (&cfg.paths.calibration, manifest) {
        (Some(p), _) => p.clone(),
        (None, Some((m, base))) => match &m.calibration {
            Some(c) => base.join(c),
            None => bail!("manifest names no calibration; set paths.calibration or --calibration"),
        },
        (None, None) => bail!("no calibration path (set paths.calibration or --calibration)"),
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading calibration {}", path.display()))?;
    CalibrationSet::from_json(&text).with_context(|| format!("parsing calibration {}", path.display()))
}

struct Dataset {
    manifest: DatasetManifest,
    base: PathBuf,
    calib: CalibrationSet,
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest_path()?;
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let calib = load_calibration(cfg, Some((&manifest, &base)))?;
    Ok(Dataset { manifest, base, calib })
}

impl Dataset {
    fn samples(&self, cfg: &RunConfig, indices: &[usize], frames: usize) -> Result<Vec<Sample>> {
        Ok(load_samples(&self.manifest, &self.base, indices, &self.calib, &cfg.pipeline, frames)?)
    }
}

fn load_checkpoint(path: &Path) -> Result<GaitModel<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (model, _) = checkpoint::load(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

pub fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.output_dir();
    let m = build_synthetic_manifest(&dir, &cfg.synth_config())
        .with_context(|| format!("writing synthetic dataset to {}", dir.display()))?;
    println!("sequences {}", m.sequences.len());
    println!("manifest {}", dir.join("manifest.json").display());
    Ok(())
}

pub fn fuse(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let calib = load_calibration(cfg, None)?;
    let out_dir = cfg.output_dir();
    let prov = cfg.provenance();
    for input in inputs {
        let records = read_records(input)?;
        let frames = fuse_records(&records, &calib, &cfg.pipeline)?;
        let fused: Vec<_> = frames.iter().map(|f| f.to_record()).collect();
        let name = input.file_name().with_context(|| format!("{} has no file name", input.display()))?;
        let out = out_dir.join(name);
        if out == *input {
            bail!("output {} would overwrite its input", out.display());
        }
        write(&out, write_sequence(&fused, Some(&prov)))?;
        println!("fused {} frames -> {}", fused.len(), out.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = open_dataset(cfg)?;
    let split = protocol::split(&data.manifest, cfg.seed)?;
    let indices: Vec<usize> = (0..data.manifest.sequences.len())
        .filter(|i| split.train.contains(&data.manifest.sequences[*i].subject))
        .collect();
    let samples = data.samples(cfg, &indices, cfg.model.frames)?;
    info!("training on {} sequences of {} subjects", samples.len(), split.train.len());

    let mut model = GaitModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let every = cfg.train.log_every.max(1);
    let trace = protocol::train(&mut model, &samples, &cfg.train_config(), |it, loss| {
        if it % every == 0 {
            info!("iteration {it} loss {loss:.5}");
        }
    })?;

    let prov = cfg.provenance();
    let dir = cfg.output_dir();
    write(&dir.join(CHECKPOINT_FILE), checkpoint::save(&model, &prov))?;
    write(&dir.join(LOSS_FILE), write_loss_trace(&trace, &prov))?;
    write(&dir.join(SPLIT_FILE), serde_json::to_string_pretty(&split)? + "\n")?;
    if let Some((_, last)) = trace.last() {
        println!("final loss {last:.6}");
    }
    println!("checkpoint {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint_path)?;
    let data = open_dataset(cfg)?;
    let split = protocol::split(&data.manifest, cfg.seed)?;
    split.check_disjoint()?;
    let (g_idx, p_idx) = data.manifest.gallery_probe(&split.test, cfg.eval.gallery_condition, cfg.eval.gallery_reps);
    if g_idx.is_empty() || p_idx.is_empty() {
        bail!("test split yields {} gallery and {} probe sequences", g_idx.len(), p_idx.len());
    }
    let frames = model.config.frames;
    let gallery = extract(&model, &data.samples(cfg, &g_idx, frames)?, cfg.workers)?;
    let probes = extract(&model, &data.samples(cfg, &p_idx, frames)?, cfg.workers)?;
    let result = evaluate(&gallery, &probes, cfg.eval.metric);
    let csv = result.to_csv(&cfg.provenance());
    write(&cfg.output_dir().join(EVAL_FILE), &csv)?;
    print!("{}", csv.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    println!("overall {:.4}", result.overall);
    Ok(())
}

pub fn params(cfg: &RunConfig) -> Result<()> {
    println!("{}", count_parameters(&cfg.model)?);
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig, checkpoint_path: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint_path)?;
    let data = open_dataset(cfg)?;
    let all: Vec<usize> = (0..data.manifest.sequences.len()).collect();
    let samples = data.samples(cfg, &all, model.config.frames)?;
    let batch = extract(&model, &samples, cfg.workers)?;
    let names: Vec<&str> = PyramidSpec::standard().groups.iter().map(|g| g.name).collect();
    let out = cfg.output_dir().join(EMBEDDINGS_FILE);
    write(&out, embeddings_csv(&batch, &names, &cfg.provenance()))?;
    println!("rows {}", batch.len());
    println!("embeddings {}", out.display());
    Ok(())
}
