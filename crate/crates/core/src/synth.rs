//! Procedural walkers and a virtual three-device rig that observes them.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::fusion::{JointSlot, SkeletonFrame32};
use crate::geometry::{CalibrationSet, ChainMode, DeviceId, FrameId, Mat3, RigidTransform, Vec3};
use crate::io::{content_hash, write_sequence, Provenance};
use crate::protocol::{Condition, DatasetManifest, SequenceEntry, Sex, Subject, View, MANIFEST_FORMAT};
use crate::skeleton::*;

pub const FPS: f64 = 30.0;
/// Center of the walking area in the master color frame (mm).
pub const STAGE_CENTER: Vec3 = Vec3::new(0.0, 0.0, 3000.0);
const FLOOR_Y: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityProfile {
    pub height: f64,
    pub neck: f64,
    pub upper_spine: f64,
    pub lower_spine: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shank: f64,
    pub frequency_hz: f64,
    pub stride_mm: f64,
    pub arm_swing_rad: f64,
    /// Peak knee flexion relative to the hip swing amplitude.
    pub knee_ratio: f64,
    pub elbow_bend_rad: f64,
    pub phase_offset_rad: f64,
    pub trunk_lean_rad: f64,
    pub noise_mm: f64,
}

impl IdentityProfile {
    /// Bone lengths keyed by child joint; entry 0 is unused.
    pub fn bone_lengths(&self) -> [f64; NUM_JOINTS] {
        let mut b = [0.0; NUM_JOINTS];
        b[NAVEL] = self.lower_spine;
        b[NECK] = self.upper_spine;
        b[HEAD] = self.neck;
        b[L_SHOULDER] = self.shoulder_half;
        b[R_SHOULDER] = self.shoulder_half;
        b[L_ELBOW] = self.upper_arm;
        b[R_ELBOW] = self.upper_arm;
        b[L_WRIST] = self.forearm;
        b[R_WRIST] = self.forearm;
        b[L_HIP] = self.hip_half;
        b[R_HIP] = self.hip_half;
        b[L_KNEE] = self.thigh;
        b[R_KNEE] = self.thigh;
        b[L_ANKLE] = self.shank;
        b[R_ANKLE] = self.shank;
        b
    }

    pub fn leg_length(&self) -> f64 {
        self.thigh + self.shank
    }

    pub fn hip_amplitude(&self) -> f64 {
        (self.stride_mm / 4.0 / self.leg_length()).atan()
    }

    pub fn speed_mm_s(&self) -> f64 {
        self.stride_mm * self.frequency_hz
    }
}

pub fn gen_identity(seed: u64) -> IdentityProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = rng.random_range(1540.0..1860.0);
    let base = [0.10, 0.19, 0.15, 0.30, 0.26];
    let raw: Vec<f64> = base.iter().map(|p| p * rng.random_range(0.92..1.08)).collect();
    let total: f64 = raw.iter().sum();
    let seg: Vec<f64> = raw.iter().map(|p| p / total * height).collect();
    let sb = 0.23 * height * rng.random_range(0.9..1.1);
    let shr = rng.random_range(1.15..1.55);
    let leg = seg[3] + seg[4];
    IdentityProfile {
        height,
        neck: seg[0],
        upper_spine: seg[1],
        lower_spine: seg[2],
        shoulder_half: sb / 2.0,
        hip_half: sb / shr / 2.0,
        upper_arm: 0.17 * height * rng.random_range(0.93..1.07),
        forearm: 0.15 * height * rng.random_range(0.93..1.07),
        thigh: seg[3],
        shank: seg[4],
        frequency_hz: rng.random_range(0.8..1.1),
        stride_mm: leg * rng.random_range(1.25..1.65),
        arm_swing_rad: rng.random_range(0.25..0.55),
        knee_ratio: rng.random_range(1.4..2.2),
        elbow_bend_rad: rng.random_range(0.1..0.5),
        phase_offset_rad: rng.random_range(0.0..TAU),
        trunk_lean_rad: rng.random_range(0.0..0.12),
        noise_mm: 5.0,
    }
}

/// Unit walking direction for a heading in radians; heading 0 walks toward
/// the master device.
pub fn heading_vector(heading: f64) -> Vec3 {
    Vec3::new(-heading.sin(), 0.0, -heading.cos())
}

const UP: Vec3 = Vec3::new(0.0, -1.0, 0.0);

fn limb_dir(forward: Vec3, angle: f64) -> Vec3 {
    -UP * angle.cos() + forward * angle.sin()
}

/// Knee flexion angles `(left, right)` at time `t` seconds.
pub fn knee_angles(p: &IdentityProfile, t: f64) -> (f64, f64) {
    let phi = TAU * p.frequency_hz * t + p.phase_offset_rad;
    let a = p.knee_ratio * p.hip_amplitude();
    (a * (1.0 + phi.sin()) / 2.0, a * (1.0 + (phi + PI).sin()) / 2.0)
}

/// Pose at `t` seconds with the pelvis at the origin.
pub fn pose_at(p: &IdentityProfile, heading: f64, t: f64) -> Skeleton16 {
    let f = heading_vector(heading);
    let r = f.cross(UP);
    let phi = TAU * p.frequency_hz * t + p.phase_offset_rad;
    let hip_amp = p.hip_amplitude();
    let (kl, kr) = knee_angles(p, t);
    let trunk = UP * p.trunk_lean_rad.cos() + f * p.trunk_lean_rad.sin();

    let mut j = [Vec3::ZERO; NUM_JOINTS];
    j[NAVEL] = trunk * p.lower_spine;
    j[NECK] = j[NAVEL] + trunk * p.upper_spine;
    j[HEAD] = j[NECK] + trunk * p.neck;
    j[L_SHOULDER] = j[NECK] - r * p.shoulder_half;
    j[R_SHOULDER] = j[NECK] + r * p.shoulder_half;
    j[L_HIP] = -r * p.hip_half;
    j[R_HIP] = r * p.hip_half;

    for (hip, knee, ankle, theta, kappa) in [
        (L_HIP, L_KNEE, L_ANKLE, hip_amp * phi.sin(), kl),
        (R_HIP, R_KNEE, R_ANKLE, hip_amp * (phi + PI).sin(), kr),
    ] {
        j[knee] = j[hip] + limb_dir(f, theta) * p.thigh;
        j[ankle] = j[knee] + limb_dir(f, theta - kappa) * p.shank;
    }
    for (shoulder, elbow, wrist, swing) in [
        (L_SHOULDER, L_ELBOW, L_WRIST, p.arm_swing_rad * (phi + PI).sin()),
        (R_SHOULDER, R_ELBOW, R_WRIST, p.arm_swing_rad * phi.sin()),
    ] {
        j[elbow] = j[shoulder] + limb_dir(f, swing) * p.upper_arm;
        j[wrist] = j[elbow] + limb_dir(f, swing + p.elbow_bend_rad) * p.forearm;
    }
    Skeleton16(j)
}

/// Heading in radians at normalized time `u` in `[0, 1]`. Turning views
/// sweep 90 degrees around their label midway through the walk.
pub fn heading_at(view: View, u: f64) -> f64 {
    let base = view.degrees().to_radians();
    if !view.is_turning() {
        return base;
    }
    let s = ((u - 0.35) / 0.3).clamp(0.0, 1.0);
    let smooth = s * s * (3.0 - 2.0 * s);
    base - PI / 4.0 + PI / 2.0 * smooth
}

/// Ground-truth world-frame skeletons, one per frame at 30 fps. The walk is
/// centered on [`STAGE_CENTER`].
pub fn simulate_walk(p: &IdentityProfile, view: View, n_frames: usize) -> Vec<Skeleton16> {
    let dt = 1.0 / FPS;
    let speed = p.speed_mm_s();
    let denom = (n_frames.max(2) - 1) as f64;
    let mut pelvis = Vec::with_capacity(n_frames);
    let mut pos = Vec3::ZERO;
    for k in 0..n_frames {
        if k > 0 {
            pos += heading_vector(heading_at(view, (k as f64 - 0.5) / denom)) * (speed * dt);
        }
        pelvis.push(pos);
    }
    let mean = pelvis.iter().fold(Vec3::ZERO, |a, b| a + *b) * (1.0 / n_frames.max(1) as f64);
    let bob_amp = 0.015 * p.stride_mm;
    (0..n_frames)
        .map(|k| {
            let t = k as f64 * dt;
            let phi = TAU * p.frequency_hz * t + p.phase_offset_rad;
            let base = pelvis[k] - mean + STAGE_CENTER;
            let height = FLOOR_Y - p.leg_length() * 0.97 - bob_amp * (2.0 * phi).cos();
            let root = Vec3::new(base.x, height, base.z);
            let pose = pose_at(p, heading_at(view, k as f64 / denom), t);
            pose.map(|v| v + root)
        })
        .collect()
}

/// Yaw-dependent self-occlusion. Probabilities are multiplied by the
/// condition severity and clamped to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionModel {
    /// Per-joint dropout probability at full exposure.
    pub dropout: f64,
    /// Probability that a visible joint is tracked badly at full exposure.
    pub degrade: f64,
    pub degraded_confidence: f64,
    pub error_mm: f64,
    pub base_confidence: f64,
    /// Whole-frame loss probability per device.
    pub blackout: [f64; 3],
    /// Exposure added for joints seen from behind.
    pub back_exposure: f64,
    /// Probability that a carried object or garment displaces a joint for
    /// every device at once.
    pub occluder: f64,
    /// Displacement per unit of severity.
    pub occluder_error_mm: f64,
}

impl Default for OcclusionModel {
    fn default() -> Self {
        Self {
            dropout: 0.15,
            degrade: 0.2,
            degraded_confidence: 0.3,
            error_mm: 250.0,
            base_confidence: 0.9,
            blackout: [0.01; 3],
            back_exposure: 0.3,
            occluder: 0.04,
            occluder_error_mm: 50.0,
        }
    }
}

impl OcclusionModel {
    pub fn none() -> Self {
        Self { dropout: 0.0, degrade: 0.0, blackout: [0.0; 3], occluder: 0.0, ..Self::default() }
    }
}

fn joint_side(j: usize) -> f64 {
    match j {
        L_SHOULDER | L_ELBOW | L_WRIST | L_HIP | L_KNEE | L_ANKLE => -1.0,
        R_SHOULDER | R_ELBOW | R_WRIST | R_HIP | R_KNEE | R_ANKLE => 1.0,
        _ => 0.0,
    }
}

/// Three devices on a circle around the stage: the master at angle 0 and
/// the subordinates at +/-135 degrees, all facing the center.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRig {
    /// Device color frame to world, in device order.
    pub color_to_world: [(Mat3, Vec3); 3],
    pub depth_to_color: [RigidTransform; 3],
    pub calibration: CalibrationSet,
}

impl VirtualRig {
    pub fn standard() -> Self {
        let radius = 3000.0;
        let angles = [0.0f64, 135.0f64.to_radians(), -135.0f64.to_radians()];
        let mut color_to_world = [(Mat3::IDENTITY, Vec3::ZERO); 3];
        for (i, a) in angles.iter().enumerate().skip(1) {
            let pos = STAGE_CENTER + Vec3::new(a.sin(), 0.0, -a.cos()) * radius;
            let z = (STAGE_CENTER - pos) * (1.0 / (STAGE_CENTER - pos).norm());
            let y0 = Vec3::new(0.0, 1.0, 0.0);
            let y = y0 - z * y0.dot(z);
            let y = y * (1.0 / y.norm());
            let x = y.cross(z);
            color_to_world[i] = (Mat3([x.x, y.x, z.x, x.y, y.y, z.y, x.z, y.z, z.z]), pos);
        }
        let tilts = [6.0f64, 5.0, 7.0];
        let depth_to_color = std::array::from_fn(|i| {
            let d = DeviceId::ALL[i];
            RigidTransform::new(
                Mat3::rot_x(tilts[i].to_radians()).mul_mat(&Mat3::rot_y(0.3f64.to_radians())),
                Vec3::new(-32.0, -2.0, 4.0),
                FrameId::depth(d),
                FrameId::color(d),
            )
            .expect("valid depth calibration")
        });
        let to_master = |i: usize| {
            let (r, t) = color_to_world[i];
            RigidTransform::new(r, t, FrameId::color(DeviceId::ALL[i]), FrameId::MASTER_COLOR).expect("valid pose")
        };
        let s1 = to_master(1);
        let s2 = to_master(2);
        let s1_to_s2 = s2.invert().compose(&s1).expect("chain");
        let mut transforms = depth_to_color.to_vec();
        transforms.extend([s1, s2, s1_to_s2]);
        let calibration = CalibrationSet::new(transforms).expect("rig calibration is connected");
        Self { color_to_world, depth_to_color, calibration }
    }

    pub fn device_position(&self, d: DeviceId) -> Vec3 {
        self.color_to_world[d as usize].1
    }

    /// Per-device observations in each device's depth frame. All random
    /// draws are made regardless of the outcome, so the same `rng` state
    /// gives nested corruption for increasing `severity`.
    pub fn observe(
        &self,
        gt: &[Skeleton16],
        noise_mm: f64,
        occlusion: &OcclusionModel,
        severity: f64,
        rng: &mut impl Rng,
    ) -> [Vec<SkeletonFrame32>; 3] {
        let noise = Normal::new(0.0, noise_mm.max(0.0)).expect("finite noise");
        let inv: Vec<RigidTransform> = DeviceId::ALL
            .iter()
            .map(|d| self.calibration.chain_to_master(*d, ChainMode::Strict).expect("rig chain").invert())
            .collect();
        let mut out: [Vec<SkeletonFrame32>; 3] = Default::default();
        for (k, skel) in gt.iter().enumerate() {
            let pelvis = skel.joint(PELVIS);
            let r = skel.joint(R_HIP) - skel.joint(L_HIP);
            let r = r * (1.0 / r.norm().max(1e-12));
            let forward = UP.cross(r);
            let shared: Vec<Option<Vec3>> = (0..NUM_JOINTS)
                .map(|_| {
                    let u: f64 = rng.random();
                    let dir: [f64; 3] = UnitSphere.sample(rng);
                    (u < (occlusion.occluder * severity).min(1.0)).then(|| Vec3::from_array(dir) * (occlusion.occluder_error_mm * severity))
                })
                .collect();
            for (di, d) in DeviceId::ALL.iter().enumerate() {
                let to_dev = self.device_position(*d) - pelvis;
                let to_dev = Vec3::new(to_dev.x, 0.0, to_dev.z);
                let to_dev = to_dev * (1.0 / to_dev.norm().max(1e-12));
                let side = r.dot(to_dev);
                let back = (-forward.dot(to_dev)).max(0.0) * occlusion.back_exposure;
                let black = rng.random::<f64>() < (occlusion.blackout[di] * severity).min(1.0);
                let mut frame = SkeletonFrame32::empty(k as u64, *d);
                for j in 0..NUM_JOINTS {
                    let u_drop: f64 = rng.random();
                    let u_deg: f64 = rng.random();
                    let dir: [f64; 3] = UnitSphere.sample(rng);
                    let e = Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                    if black {
                        continue;
                    }
                    let exposure = ((-joint_side(j) * side).max(0.0) + back).min(1.0);
                    if u_drop < (occlusion.dropout * severity * exposure).min(1.0) {
                        continue;
                    }
                    let mut pos = inv[di].apply(skel.joint(j) + shared[j].unwrap_or(Vec3::ZERO));
                    let mut conf = occlusion.base_confidence;
                    if u_deg < (occlusion.degrade * severity * exposure).min(1.0) {
                        pos += Vec3::from_array(dir) * occlusion.error_mm;
                        conf = occlusion.degraded_confidence;
                    }
                    if noise_mm > 0.0 {
                        pos += e;
                    }
                    frame.slots[SOURCE_JOINTS[j]] = Some(JointSlot { position: pos, confidence: conf });
                }
                out[di].push(frame);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub conditions: Vec<Condition>,
    pub views: Vec<View>,
    pub reps: usize,
    pub seed: u64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub occlusion: OcclusionModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 8,
            conditions: vec![Condition::Lcl],
            views: View::STRAIGHT.to_vec(),
            reps: 3,
            seed: 0,
            min_frames: 60,
            max_frames: 90,
            occlusion: OcclusionModel::default(),
        }
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        h = (h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

pub fn identity_seed(seed: u64, id: usize) -> u64 {
    mix(seed, &[id as u64])
}

/// Seed of one recording. The condition is deliberately not part of it, so
/// conditions differ only in occlusion severity.
pub fn sequence_seed(seed: u64, id: usize, view: View, rep: usize) -> u64 {
    mix(seed, &[id as u64, view.degrees() as u64, rep as u64, 1])
}

pub fn subject_sex(id: usize) -> Sex {
    if id.is_multiple_of(2) {
        Sex::Female
    } else {
        Sex::Male
    }
}

/// Raw three-device records of one synthetic recording and its frame count.
pub fn synth_records(rig: &VirtualRig, cfg: &SynthConfig, id: usize, condition: Condition, view: View, rep: usize) -> Vec<crate::io::FrameRecord> {
    let profile = gen_identity(identity_seed(cfg.seed, id));
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(cfg.seed, id, view, rep));
    let n = rng.random_range(cfg.min_frames..=cfg.max_frames.max(cfg.min_frames));
    let gt = simulate_walk(&profile, view, n);
    let obs = rig.observe(&gt, profile.noise_mm, &cfg.occlusion, condition.severity(), &mut rng);
    (0..n).flat_map(|k| obs.iter().map(move |dev| dev[k].to_record())).collect()
}

/// Writes one recording per (identity, condition, view, rep), the rig
/// calibration and the manifest into `dir`.
pub fn build_synthetic_manifest(dir: &Path, cfg: &SynthConfig) -> std::io::Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let hash = content_hash(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    let prov = Provenance::new(hash.clone(), cfg.seed);
    let rig = VirtualRig::standard();
    std::fs::write(dir.join("calibration.json"), rig.calibration.to_json(Some(&prov)))?;
    let mut sequences = Vec::new();
    for id in 0..cfg.n_ids {
        for &condition in &cfg.conditions {
            for &view in &cfg.views {
                for rep in 0..cfg.reps {
                    let records = synth_records(&rig, cfg, id, condition, view, rep);
                    let path = format!("s{id:03}_{condition}_{view}_r{rep}.jsonl");
                    std::fs::write(dir.join(&path), write_sequence(&records, Some(&prov)))?;
                    sequences.push(SequenceEntry { subject: id, condition, view, rep, frames: records.len() / 3, path });
                }
            }
        }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        config_hash: Some(hash),
        seed: Some(cfg.seed),
        calibration: Some("calibration.json".into()),
        subjects: (0..cfg.n_ids).map(|id| Subject { id, sex: subject_sex(id) }).collect(),
        sequences,
    };
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}
