//! Alignment of per-device skeleton frames into the target frame and fusion
//! of the aligned observations into optimized joints (OJ).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DeviceId, RigidTransform, Vec3};
use crate::io::{FrameRecord, Source};

/// Joints tracked per device frame.
pub const NUM_SOURCE_JOINTS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no frames to fuse")]
    Empty,
    #[error("frame index mismatch: {0} vs {1}")]
    FrameIndexMismatch(u64, u64),
    #[error("device {0} appears more than once")]
    DuplicateDevice(DeviceId),
    #[error("invalid fusion policy: {0}")]
    InvalidPolicy(String),
    #[error("record from {0} cannot be used as a device frame")]
    NotADevice(Source),
    #[error("record has {0} joint slots, expected 32")]
    SlotCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObservation {
    pub device: DeviceId,
    pub frame_index: u64,
    pub joint_id: usize,
    pub position: Vec3,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSlot {
    pub position: Vec3,
    pub confidence: f64,
}

/// One device's tracked skeleton at one frame; absent joints are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame32 {
    pub frame_index: u64,
    pub device: DeviceId,
    pub slots: [Option<JointSlot>; NUM_SOURCE_JOINTS],
}

impl SkeletonFrame32 {
    pub fn empty(frame_index: u64, device: DeviceId) -> Self {
        Self { frame_index, device, slots: [None; NUM_SOURCE_JOINTS] }
    }

    pub fn observations(&self) -> impl Iterator<Item = JointObservation> + '_ {
        self.slots.iter().enumerate().filter_map(move |(j, s)| {
            s.map(|s| JointObservation {
                device: self.device,
                frame_index: self.frame_index,
                joint_id: j,
                position: s.position,
                confidence: s.confidence,
            })
        })
    }

    pub fn to_record(&self) -> FrameRecord {
        FrameRecord {
            t: self.frame_index,
            source: Source::Device(self.device),
            joints: self.slots.iter().map(|s| s.map(|s| s.position)).collect(),
            conf: self.slots.iter().map(|s| s.map_or(0.0, |s| s.confidence)).collect(),
        }
    }

    pub fn from_record(r: &FrameRecord) -> Result<Self, FusionError> {
        let Source::Device(device) = r.source else {
            return Err(FusionError::NotADevice(r.source));
        };
        if r.joints.len() != NUM_SOURCE_JOINTS {
            return Err(FusionError::SlotCount(r.joints.len()));
        }
        let mut f = Self::empty(r.t, device);
        for (j, (p, c)) in r.joints.iter().zip(&r.conf).enumerate() {
            f.slots[j] = p.map(|position| JointSlot { position, confidence: *c });
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    ConfidenceWeightedMean,
    MedianPerAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionPolicy {
    pub strategy: FusionStrategy,
    /// mm
    pub outlier_threshold: f64,
    pub min_confidence: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::ConfidenceWeightedMean,
            outlier_threshold: 150.0,
            min_confidence: 0.1,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.outlier_threshold > 0.0) {
            return Err(FusionError::InvalidPolicy("outlier_threshold must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(FusionError::InvalidPolicy("min_confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fused joints in the target frame. `sources[j]` is a bit mask over
/// [`DeviceId::ALL`] of the observations that contributed to joint `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedFrame {
    pub frame_index: u64,
    pub joints: [Option<Vec3>; NUM_SOURCE_JOINTS],
    pub confidence: [f64; NUM_SOURCE_JOINTS],
    pub sources: [u8; NUM_SOURCE_JOINTS],
}

impl OptimizedFrame {
    pub fn to_record(&self) -> FrameRecord {
        FrameRecord {
            t: self.frame_index,
            source: Source::Fused,
            joints: self.joints.to_vec(),
            conf: self.confidence.to_vec(),
        }
    }

    pub fn from_record(r: &FrameRecord) -> Result<Self, FusionError> {
        if r.joints.len() != NUM_SOURCE_JOINTS {
            return Err(FusionError::SlotCount(r.joints.len()));
        }
        let mut joints = [None; NUM_SOURCE_JOINTS];
        let mut confidence = [0.0; NUM_SOURCE_JOINTS];
        joints.copy_from_slice(&r.joints);
        confidence.copy_from_slice(&r.conf);
        Ok(Self { frame_index: r.t, joints, confidence, sources: [0; NUM_SOURCE_JOINTS] })
    }
}

pub fn device_bit(d: DeviceId) -> u8 {
    1 << (d as u8)
}

/// Applies `t` (a chain into the target frame) to every present joint.
pub fn align_frame(frame: &SkeletonFrame32, t: &RigidTransform) -> SkeletonFrame32 {
    let mut out = frame.clone();
    for slot in out.slots.iter_mut().flatten() {
        slot.position = t.apply(slot.position);
    }
    out
}

/// A joint is flagged when missing or when its confidence is strictly below
/// `min_confidence`.
pub fn occlusion_flags(frame: &SkeletonFrame32, min_confidence: f64) -> [bool; NUM_SOURCE_JOINTS] {
    frame.slots.map(|s| s.is_none_or(|s| s.confidence < min_confidence))
}

/// Confidence-weighted mean written relative to the first point, so a
/// single point or a set of identical points is returned bit-exactly.
///
/// `p0 + Σ c_i (p_i - p0) / Σ c_i`, summed in slice order; falls back to
/// equal weights when every confidence is zero.
pub fn weighted_mean(points: &[(Vec3, f64)]) -> Vec3 {
    let anchor = points[0].0;
    let total: f64 = points.iter().map(|(_, c)| *c).sum();
    let mut acc = Vec3::ZERO;
    if total > 0.0 {
        for (p, c) in points {
            acc += (*p - anchor) * *c;
        }
        anchor + acc * (1.0 / total)
    } else {
        for (p, _) in points {
            acc += *p - anchor;
        }
        anchor + acc * (1.0 / points.len() as f64)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        if a == b {
            a
        } else {
            (a + b) * 0.5
        }
    }
}

fn median_per_axis(points: &[(Vec3, f64)]) -> Vec3 {
    let mut xs: Vec<f64> = points.iter().map(|(p, _)| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|(p, _)| p.y).collect();
    let mut zs: Vec<f64> = points.iter().map(|(p, _)| p.z).collect();
    Vec3::new(median(&mut xs), median(&mut ys), median(&mut zs))
}

/// Fuses aligned frames from distinct devices into one optimized frame.
///
/// Per joint: observations under `min_confidence` are dropped; an
/// observation is an outlier when it lies farther than `outlier_threshold`
/// from the weighted centroid of the remaining observations, and the
/// lowest-confidence outlier (earliest device on ties) is removed once; the
/// survivors are combined by the policy's strategy. Contributors are always
/// visited in device order, so the result does not depend on input order.
pub fn fuse(frames: &[SkeletonFrame32], policy: &FusionPolicy) -> Result<OptimizedFrame, FusionError> {
    policy.validate()?;
    let first = frames.first().ok_or(FusionError::Empty)?;
    let mut ordered: Vec<&SkeletonFrame32> = frames.iter().collect();
    ordered.sort_by_key(|f| f.device);
    for w in ordered.windows(2) {
        if w[0].device == w[1].device {
            return Err(FusionError::DuplicateDevice(w[0].device));
        }
    }
    if let Some(f) = frames.iter().find(|f| f.frame_index != first.frame_index) {
        return Err(FusionError::FrameIndexMismatch(first.frame_index, f.frame_index));
    }

    let mut out = OptimizedFrame {
        frame_index: first.frame_index,
        joints: [None; NUM_SOURCE_JOINTS],
        confidence: [0.0; NUM_SOURCE_JOINTS],
        sources: [0; NUM_SOURCE_JOINTS],
    };
    for j in 0..NUM_SOURCE_JOINTS {
        let mut contrib: Vec<(DeviceId, Vec3, f64)> = ordered
            .iter()
            .filter_map(|f| f.slots[j].map(|s| (f.device, s.position, s.confidence)))
            .filter(|(_, _, c)| *c >= policy.min_confidence)
            .collect();
        if contrib.is_empty() {
            continue;
        }
        if contrib.len() >= 2 {
            let mut worst: Option<usize> = None;
            for i in 0..contrib.len() {
                let others: Vec<(Vec3, f64)> = contrib
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != i)
                    .map(|(_, (_, p, c))| (*p, *c))
                    .collect();
                let centroid = weighted_mean(&others);
                if contrib[i].1.distance(centroid) > policy.outlier_threshold
                    && worst.is_none_or(|w| contrib[i].2 < contrib[w].2)
                {
                    worst = Some(i);
                }
            }
            if let Some(w) = worst {
                contrib.remove(w);
            }
        }
        let points: Vec<(Vec3, f64)> = contrib.iter().map(|(_, p, c)| (*p, *c)).collect();
        let fused = match policy.strategy {
            FusionStrategy::ConfidenceWeightedMean => weighted_mean(&points),
            FusionStrategy::MedianPerAxis => median_per_axis(&points),
        };
        out.joints[j] = Some(fused);
        out.confidence[j] = contrib.iter().map(|(_, _, c)| *c).fold(f64::NEG_INFINITY, f64::max);
        out.sources[j] = contrib.iter().fold(0, |m, (d, _, _)| m | device_bit(*d));
    }
    Ok(out)
}
