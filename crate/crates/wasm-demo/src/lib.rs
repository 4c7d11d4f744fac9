//! Browser demo: simulate a walk through the three-device rig and fuse it,
//! inspect an identity's dual skeleton, and view the graph partitions.
//!
//! Every export returns a JSON string. The same functions are callable from
//! Rust and are tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use skelgait::fusion::{align_frame, fuse, FusionPolicy};
use skelgait::geometry::{ChainMode, DeviceId, Vec3};
use skelgait::graph::{GaitGraph, NormalizedAdjacency};
use skelgait::protocol::{Condition, View};
use skelgait::skeleton::{build_dual_skeleton, bone_edges, Skeleton16, JOINT_NAMES, NUM_JOINTS, SOURCE_JOINTS};
use skelgait::synth::{gen_identity, pose_at, simulate_walk, OcclusionModel, VirtualRig};

pub const MIN_FRAMES: usize = 2;
pub const MAX_FRAMES: usize = 300;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DemoError {
    #[error("{0}")]
    Label(String),
    #[error("frame count must lie in {MIN_FRAMES}..={MAX_FRAMES}, got {0}")]
    Frames(usize),
    #[error("fusion failed: {0}")]
    Fusion(String),
    #[error("skeleton: {0}")]
    Skeleton(String),
}

type Point = [f64; 3];

#[derive(Debug, Clone, Serialize)]
pub struct WalkFrame {
    pub truth: Vec<Point>,
    /// Each device's joints after alignment into the master color frame.
    pub devices: Vec<Vec<Option<Point>>>,
    pub fused: Vec<Option<Point>>,
    /// Mean joint error over the joints each source reports, in mm.
    pub device_error: Vec<Option<f64>>,
    pub fused_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WalkDemo {
    pub view: String,
    pub condition: String,
    pub severity: f64,
    pub joint_names: Vec<&'static str>,
    pub bones: Vec<(usize, usize)>,
    pub device_names: Vec<&'static str>,
    pub device_positions: Vec<Point>,
    pub frames: Vec<WalkFrame>,
    pub mean_device_error: Vec<Option<f64>>,
    pub mean_fused_error: Option<f64>,
    /// Fraction of joint slots each source reports.
    pub device_coverage: Vec<f64>,
    pub fused_coverage: f64,
}

fn mean_error(truth: &Skeleton16, est: &[Option<Point>]) -> Option<f64> {
    let errs: Vec<f64> = est
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.map(|p| Vec3::from_array(p).distance(truth.joint(j))))
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn coverage<'a>(sets: impl Iterator<Item = &'a Vec<Option<Point>>>) -> f64 {
    let (mut seen, mut total) = (0usize, 0usize);
    for s in sets {
        seen += s.iter().filter(|p| p.is_some()).count();
        total += s.len();
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

/// Walks identity `seed` past the standard rig, observes it under the
/// occlusion severity of `condition` and fuses the three devices per frame.
pub fn simulate(seed: u64, view: &str, condition: &str, frames: usize) -> Result<WalkDemo, DemoError> {
    let view: View = view.parse().map_err(DemoError::Label)?;
    let condition: Condition = condition.parse().map_err(DemoError::Label)?;
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&frames) {
        return Err(DemoError::Frames(frames));
    }
    let rig = VirtualRig::standard();
    let profile = gen_identity(seed);
    let truth = simulate_walk(&profile, view, frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let obs = rig.observe(&truth, profile.noise_mm, &OcclusionModel::default(), condition.severity(), &mut rng);
    let chains: Vec<_> = DeviceId::ALL
        .iter()
        .map(|d| rig.calibration.chain_to_master(*d, ChainMode::Strict).expect("rig chain"))
        .collect();
    let policy = FusionPolicy::default();

    let mut out = Vec::with_capacity(frames);
    for (k, gt) in truth.iter().enumerate() {
        let aligned: Vec<_> = (0..3).map(|d| align_frame(&obs[d][k], &chains[d])).collect();
        let fused = fuse(&aligned, &policy).map_err(|e| DemoError::Fusion(e.to_string()))?;
        let devices: Vec<Vec<Option<Point>>> = aligned
            .iter()
            .map(|f| SOURCE_JOINTS.iter().map(|s| f.slots[*s].map(|j| j.position.to_array())).collect())
            .collect();
        let fused: Vec<Option<Point>> = SOURCE_JOINTS.iter().map(|s| fused.joints[*s].map(Vec3::to_array)).collect();
        out.push(WalkFrame {
            truth: gt.0.iter().map(|v| v.to_array()).collect(),
            device_error: devices.iter().map(|d| mean_error(gt, d)).collect(),
            fused_error: mean_error(gt, &fused),
            devices,
            fused,
        });
    }
    Ok(WalkDemo {
        view: view.to_string(),
        condition: condition.to_string(),
        severity: condition.severity(),
        joint_names: JOINT_NAMES.to_vec(),
        bones: bone_edges().collect(),
        device_names: DeviceId::ALL.iter().map(|d| d.as_str()).collect(),
        device_positions: DeviceId::ALL.iter().map(|d| rig.device_position(*d).to_array()).collect(),
        mean_device_error: (0..3).map(|d| mean_of(out.iter().map(|f| f.device_error[d]))).collect(),
        mean_fused_error: mean_of(out.iter().map(|f| f.fused_error)),
        device_coverage: (0..3).map(|d| coverage(out.iter().map(|f| &f.devices[d]))).collect(),
        fused_coverage: coverage(out.iter().map(|f| &f.fused)),
        frames: out,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualSkeletonDemo {
    pub joint_names: Vec<&'static str>,
    pub bones: Vec<(usize, usize)>,
    pub real: Vec<Point>,
    /// Node 0 holds (height, shoulder breadth, shoulder-to-hip ratio); every
    /// other node holds parent minus joint.
    pub pseudo: Vec<Point>,
    pub height: f64,
    pub shoulder_breadth: f64,
    pub shoulder_hip_ratio: f64,
    pub bone_lengths: Vec<f64>,
}

/// Dual skeleton of identity `seed` at time `t` seconds into its gait
/// cycle, walking along `heading_deg`.
pub fn dual_skeleton(seed: u64, heading_deg: f64, t: f64) -> Result<DualSkeletonDemo, DemoError> {
    let profile = gen_identity(seed);
    let pose = pose_at(&profile, heading_deg.to_radians(), t);
    let dual = build_dual_skeleton(&pose).map_err(|e| DemoError::Skeleton(e.to_string()))?;
    let [height, shoulder_breadth, shoulder_hip_ratio] = dual.pseudo[0];
    Ok(DualSkeletonDemo {
        joint_names: JOINT_NAMES.to_vec(),
        bones: bone_edges().collect(),
        real: dual.real.0.iter().map(|v| v.to_array()).collect(),
        pseudo: dual.pseudo.to_vec(),
        height,
        shoulder_breadth,
        shoulder_hip_ratio,
        bone_lengths: (0..NUM_JOINTS).map(|j| Vec3::from_array(dual.pseudo[j]).norm()).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphDemo {
    pub joint_names: Vec<&'static str>,
    pub edges: Vec<(usize, usize)>,
    pub hops: Vec<usize>,
    pub partition_names: Vec<&'static str>,
    /// Row-major `V x V` normalized adjacency per partition.
    pub partitions: Vec<Vec<f64>>,
}

pub fn graph() -> GraphDemo {
    let g = GaitGraph::skeleton();
    let adj = NormalizedAdjacency::skeleton_default();
    GraphDemo {
        joint_names: JOINT_NAMES.to_vec(),
        edges: g.edges().to_vec(),
        hops: g.hops().to_vec(),
        partition_names: vec!["self", "centripetal", "centrifugal"],
        partitions: adj.mats,
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo output serializes")
}

#[wasm_bindgen(js_name = simulateWalk)]
pub fn simulate_walk_js(seed: u32, view: &str, condition: &str, frames: u32) -> Result<String, JsError> {
    simulate(seed.into(), view, condition, frames as usize).map(|d| to_json(&d)).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = dualSkeleton)]
pub fn dual_skeleton_js(seed: u32, heading_deg: f64, t: f64) -> Result<String, JsError> {
    dual_skeleton(seed.into(), heading_deg, t).map(|d| to_json(&d)).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = graphPartitions)]
pub fn graph_partitions_js() -> String {
    to_json(&graph())
}

#[wasm_bindgen(js_name = viewLabels)]
pub fn view_labels() -> String {
    to_json(&View::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>())
}

#[wasm_bindgen(js_name = conditionLabels)]
pub fn condition_labels() -> String {
    to_json(&Condition::ALL.iter().map(|c| c.as_str()).collect::<Vec<_>>())
}
