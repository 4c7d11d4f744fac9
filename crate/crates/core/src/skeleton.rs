//! The dual skeleton model: 16 selected joints, the bone tree, anthropometric
//! features (height, shoulder breadth, shoulder-to-hip ratio) and the pseudo
//! skeleton that carries them.

use thiserror::Error;

use crate::fusion::{OptimizedFrame, SkeletonFrame32};
use crate::geometry::Vec3;

pub const NUM_JOINTS: usize = 16;
pub const NUM_BONES: usize = 15;

/// Source (32-joint tracker) index of each selected joint.
pub const SOURCE_JOINTS: [usize; NUM_JOINTS] = [0, 1, 3, 5, 6, 7, 12, 13, 14, 18, 19, 20, 22, 23, 24, 26];

/// Names in selected-joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine_navel",
    "neck",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "head",
];

pub const PELVIS: usize = 0;
pub const NAVEL: usize = 1;
pub const NECK: usize = 2;
pub const L_SHOULDER: usize = 3;
pub const L_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_SHOULDER: usize = 6;
pub const R_ELBOW: usize = 7;
pub const R_WRIST: usize = 8;
pub const L_HIP: usize = 9;
pub const L_KNEE: usize = 10;
pub const L_ANKLE: usize = 11;
pub const R_HIP: usize = 12;
pub const R_KNEE: usize = 13;
pub const R_ANKLE: usize = 14;
pub const HEAD: usize = 15;

/// Parent of each joint in the bone tree rooted at the pelvis. Shoulders hang
/// off the neck; there are no clavicle joints.
pub const PARENT: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(PELVIS),
    Some(NAVEL),
    Some(NECK),
    Some(L_SHOULDER),
    Some(L_ELBOW),
    Some(NECK),
    Some(R_SHOULDER),
    Some(R_ELBOW),
    Some(PELVIS),
    Some(L_HIP),
    Some(L_KNEE),
    Some(PELVIS),
    Some(R_HIP),
    Some(R_KNEE),
    Some(NECK),
];

/// `(parent, child)` pairs of the bone tree.
pub fn bone_edges() -> impl Iterator<Item = (usize, usize)> {
    PARENT.iter().enumerate().filter_map(|(c, p)| p.map(|p| (p, c)))
}

/// Selected index of a source joint, if it is one of the 16.
pub fn selected_index(source: usize) -> Option<usize> {
    SOURCE_JOINTS.iter().position(|&s| s == source)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("incomplete skeleton: source joint {0} ({1}) missing")]
    Incomplete(usize, &'static str),
    #[error("degenerate skeleton: zero hip width")]
    ZeroHipWidth,
    #[error("non-finite joint {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton16(pub [Vec3; NUM_JOINTS]);

impl Skeleton16 {
    pub fn new(joints: [Vec3; NUM_JOINTS]) -> Result<Self, SkeletonError> {
        if let Some(j) = joints.iter().position(|p| !p.is_finite()) {
            return Err(SkeletonError::NonFinite(j));
        }
        Ok(Self(joints))
    }

    pub fn joint(&self, j: usize) -> Vec3 {
        self.0[j]
    }

    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> Skeleton16 {
        Skeleton16(self.0.map(f))
    }
}

fn select(joints: &[Option<Vec3>; 32]) -> Result<Skeleton16, SkeletonError> {
    let mut out = [Vec3::ZERO; NUM_JOINTS];
    for (i, &src) in SOURCE_JOINTS.iter().enumerate() {
        out[i] = joints[src].ok_or(SkeletonError::Incomplete(src, JOINT_NAMES[i]))?;
    }
    Skeleton16::new(out)
}

pub fn select_joints(frame: &OptimizedFrame) -> Result<Skeleton16, SkeletonError> {
    select(&frame.joints)
}

pub fn select_joints_raw(frame: &SkeletonFrame32) -> Result<Skeleton16, SkeletonError> {
    select(&frame.slots.map(|s| s.map(|s| s.position)))
}

/// Bone vectors `parent - child`, keyed by child joint (index 0 unused).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneSet(pub [Vec3; NUM_JOINTS]);

impl BoneSet {
    /// Bone ending at `child`; `child` must not be the pelvis.
    pub fn bone(&self, child: usize) -> Vec3 {
        debug_assert_ne!(child, PELVIS);
        self.0[child]
    }

    pub fn length(&self, child: usize) -> f64 {
        self.bone(child).norm()
    }
}

pub fn compute_bones(s: &Skeleton16) -> BoneSet {
    let mut b = [Vec3::ZERO; NUM_JOINTS];
    for (parent, child) in bone_edges() {
        b[child] = s.joint(parent) - s.joint(child);
    }
    BoneSet(b)
}

/// Neck + upper spine + lower spine + mean of the two legs (thigh + shank).
pub fn compute_height(s: &Skeleton16) -> f64 {
    let b = compute_bones(s);
    b.length(HEAD)
        + b.length(NECK)
        + b.length(NAVEL)
        + (b.length(R_KNEE) + b.length(R_ANKLE) + b.length(L_KNEE) + b.length(L_ANKLE)) / 2.0
}

/// Shoulder breadth and shoulder-to-hip ratio.
pub fn compute_sb_shr(s: &Skeleton16) -> Result<(f64, f64), SkeletonError> {
    let sb = s.joint(R_SHOULDER).distance(s.joint(L_SHOULDER));
    let hip = s.joint(R_HIP).distance(s.joint(L_HIP));
    if hip == 0.0 {
        return Err(SkeletonError::ZeroHipWidth);
    }
    Ok((sb, sb / hip))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnthropometricFeatures {
    pub height: f64,
    pub shoulder_breadth: f64,
    pub shoulder_hip_ratio: f64,
}

pub fn anthropometrics(s: &Skeleton16) -> Result<AnthropometricFeatures, SkeletonError> {
    let (sb, shr) = compute_sb_shr(s)?;
    Ok(AnthropometricFeatures { height: compute_height(s), shoulder_breadth: sb, shoulder_hip_ratio: shr })
}

/// Real skeleton plus the pseudo skeleton on the same topology: node `i > 0`
/// carries the bone ending at `i`, node 0 carries the fake bone `(H, SB, SHR)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSkeleton {
    pub real: Skeleton16,
    pub pseudo: [[f64; 3]; NUM_JOINTS],
}

pub fn build_dual_skeleton(s: &Skeleton16) -> Result<DualSkeleton, SkeletonError> {
    let a = anthropometrics(s)?;
    let bones = compute_bones(s);
    let mut pseudo = bones.0.map(Vec3::to_array);
    pseudo[PELVIS] = [a.height, a.shoulder_breadth, a.shoulder_hip_ratio];
    Ok(DualSkeleton { real: *s, pseudo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::NUM_SOURCE_JOINTS;

    fn segment_skeleton() -> Skeleton16 {
        // upright figure along +y, segment lengths chosen for an analytic height
        let mut j = [Vec3::ZERO; NUM_JOINTS];
        j[PELVIS] = Vec3::new(0.0, 0.0, 0.0);
        j[NAVEL] = Vec3::new(0.0, 200.0, 0.0);
        j[NECK] = Vec3::new(0.0, 500.0, 0.0);
        j[HEAD] = Vec3::new(0.0, 750.0, 0.0);
        j[L_SHOULDER] = Vec3::new(-200.0, 500.0, 0.0);
        j[R_SHOULDER] = Vec3::new(200.0, 500.0, 0.0);
        j[L_ELBOW] = Vec3::new(-200.0, 200.0, 0.0);
        j[R_ELBOW] = Vec3::new(200.0, 200.0, 0.0);
        j[L_WRIST] = Vec3::new(-200.0, -50.0, 0.0);
        j[R_WRIST] = Vec3::new(200.0, -50.0, 0.0);
        j[L_HIP] = Vec3::new(-160.0, 0.0, 0.0);
        j[R_HIP] = Vec3::new(160.0, 0.0, 0.0);
        j[L_KNEE] = Vec3::new(-160.0, -450.0, 0.0);
        j[R_KNEE] = Vec3::new(160.0, -450.0, 0.0);
        j[L_ANKLE] = Vec3::new(-160.0, -850.0, 0.0);
        j[R_ANKLE] = Vec3::new(160.0, -850.0, 0.0);
        Skeleton16::new(j).unwrap()
    }

    #[test]
    fn mapping_is_bijective() {
        for (i, s) in SOURCE_JOINTS.iter().enumerate() {
            assert_eq!(selected_index(*s), Some(i));
        }
        let mut sorted = SOURCE_JOINTS.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), NUM_JOINTS);
        assert_eq!(selected_index(2), None);
    }

    #[test]
    fn tree_shape() {
        assert_eq!(bone_edges().count(), NUM_BONES);
        // every non-root joint reaches the pelvis
        for j in 1..NUM_JOINTS {
            let mut k = j;
            let mut steps = 0;
            while let Some(p) = PARENT[k] {
                k = p;
                steps += 1;
                assert!(steps < NUM_JOINTS);
            }
            assert_eq!(k, PELVIS);
        }
    }

    #[test]
    fn select_from_frame() {
        let mut f = OptimizedFrame {
            frame_index: 0,
            joints: [None; NUM_SOURCE_JOINTS],
            confidence: [1.0; NUM_SOURCE_JOINTS],
            sources: [1; NUM_SOURCE_JOINTS],
        };
        for j in 0..NUM_SOURCE_JOINTS {
            f.joints[j] = Some(Vec3::new(j as f64, 0.0, 0.0));
        }
        let s = select_joints(&f).unwrap();
        for (i, src) in SOURCE_JOINTS.iter().enumerate() {
            assert_eq!(s.joint(i).x, *src as f64);
        }
        f.joints[7] = None;
        assert_eq!(select_joints(&f), Err(SkeletonError::Incomplete(7, "l_wrist")));
    }

    #[test]
    fn analytic_height() {
        let s = segment_skeleton();
        assert_eq!(compute_height(&s), 1600.0);
        let (sb, shr) = compute_sb_shr(&s).unwrap();
        assert_eq!(sb, 400.0);
        assert_eq!(shr, 1.25);
    }

    #[test]
    fn degenerate() {
        let s = Skeleton16([Vec3::new(1.0, 2.0, 3.0); NUM_JOINTS]);
        assert_eq!(compute_height(&s), 0.0);
        assert_eq!(compute_sb_shr(&s), Err(SkeletonError::ZeroHipWidth));
        assert!(build_dual_skeleton(&s).is_err());
    }

    #[test]
    fn bones_translation_invariant() {
        let s = segment_skeleton();
        let t = s.map(|p| p + Vec3::new(31.0, -7.0, 1200.0));
        let (a, b) = (compute_bones(&s), compute_bones(&t));
        for j in 1..NUM_JOINTS {
            assert!(a.bone(j).max_abs_diff(b.bone(j)) < 1e-9);
        }
    }

    #[test]
    fn mirrored_sb_shr() {
        let s = segment_skeleton().map(|p| Vec3::new(-p.x, p.y, p.z));
        assert_eq!(compute_sb_shr(&s).unwrap(), (400.0, 1.25));
    }

    #[test]
    fn dual_skeleton_nodes() {
        let s = segment_skeleton();
        let d = build_dual_skeleton(&s).unwrap();
        assert_eq!(d.pseudo[PELVIS], [1600.0, 400.0, 1.25]);
        let b = compute_bones(&s);
        for j in 1..NUM_JOINTS {
            assert_eq!(d.pseudo[j], b.bone(j).to_array());
        }
        let moved = build_dual_skeleton(&s.map(|p| p + Vec3::new(5.0, 5.0, 5.0))).unwrap();
        for j in 0..NUM_JOINTS {
            for c in 0..3 {
                assert!((moved.pseudo[j][c] - d.pseudo[j][c]).abs() < 1e-9);
            }
        }
    }
}
