//! Raw multi-device recordings to network inputs: align every device into the
//! master color frame, fuse, select the 16 joints, build dual skeletons and
//! resample into gait tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{align_frame, fuse, FusionError, FusionPolicy, OptimizedFrame, SkeletonFrame32};
use crate::geometry::{CalibrationSet, ChainMode, GeometryError};
use crate::graph::{sequence_to_tensors, GaitTensor, GraphError};
use crate::io::{read_sequence, FrameRecord, IoError, Source};
use crate::skeleton::{build_dual_skeleton, select_joints, DualSkeleton};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Format(#[from] IoError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("frame {0} mixes fused and per-device records")]
    MixedSources(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub chain_mode: ChainMode,
    pub fusion: FusionPolicy,
}

/// Aligns and fuses per-device records, one optimized frame per time stamp in
/// ascending order. Records that are already fused pass through unchanged.
pub fn fuse_records(
    records: &[FrameRecord],
    calib: &CalibrationSet,
    opts: &PipelineOptions,
) -> Result<Vec<OptimizedFrame>, PipelineError> {
    let mut by_t: BTreeMap<u64, Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        by_t.entry(r.t).or_default().push(r);
    }
    let chains = crate::geometry::DeviceId::ALL
        .iter()
        .map(|d| calib.chain_to_master(*d, opts.chain_mode).map(|c| (*d, c)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let mut out = Vec::with_capacity(by_t.len());
    for (t, group) in by_t {
        let fused: Vec<_> = group.iter().filter(|r| r.source == Source::Fused).collect();
        if !fused.is_empty() {
            if group.len() != 1 {
                return Err(PipelineError::MixedSources(t));
            }
            out.push(OptimizedFrame::from_record(fused[0])?);
            continue;
        }
        let aligned = group
            .iter()
            .map(|r| {
                let f = SkeletonFrame32::from_record(r)?;
                Ok(align_frame(&f, &chains[&f.device]))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        out.push(fuse(&aligned, &opts.fusion)?);
    }
    Ok(out)
}

/// Dual skeletons for every frame whose 16 selected joints are present; the
/// second value counts dropped frames.
pub fn dual_skeletons(frames: &[OptimizedFrame]) -> (Vec<DualSkeleton>, usize) {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        if let Ok(d) = select_joints(f).and_then(|s| build_dual_skeleton(&s)) {
            out.push(d);
        }
    }
    let dropped = frames.len() - out.len();
    (out, dropped)
}

/// Real and pseudo tensors for one recording, or `None` when fewer than two
/// usable frames remain.
pub fn records_to_tensors(
    records: &[FrameRecord],
    calib: &CalibrationSet,
    opts: &PipelineOptions,
    frames: usize,
) -> Result<Option<(GaitTensor, GaitTensor)>, PipelineError> {
    let fused = fuse_records(records, calib, opts)?;
    let (duals, _) = dual_skeletons(&fused);
    if duals.len() < 2 {
        return Ok(None);
    }
    Ok(Some(sequence_to_tensors(&duals, frames)?))
}

pub fn read_records(path: &Path) -> Result<Vec<FrameRecord>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Read { path: path.display().to_string(), source })?;
    Ok(read_sequence(&text)?.1)
}
