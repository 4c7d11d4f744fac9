//! Rigid-transform algebra and the multi-device calibration chain.
//!
//! Every device carries a color camera and a depth camera, so a three-device
//! rig has six coordinate frames. Joints tracked in any device's depth frame
//! are brought into the master color frame by chaining the per-device
//! depth-to-color calibration with the pairwise color-to-color calibration.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by [`validate_rotation`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("calibration invalid: {0}")]
    InvalidRotation(RotationViolation),
    #[error("calibration invalid: transform maps frame {0} onto itself")]
    SameFrame(FrameId),
    #[error("calibration invalid: non-finite translation")]
    NonFiniteTranslation,
    #[error("chain error: cannot compose {outer_from} <- {inner_to}")]
    FrameMismatch { outer_from: FrameId, inner_to: FrameId },
    #[error("chain error: no calibration between {0} and {1}")]
    MissingPair(FrameId, FrameId),
    #[error("calibration invalid: frame {0} has no path to master.color")]
    Unreachable(FrameId),
    #[error("calibration file: {0}")]
    Format(String),
}

/// Describes which rotation check failed and by how much.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationViolation {
    NonFinite,
    NotOrthonormal { max_deviation: f64 },
    Determinant { det: f64 },
}

impl fmt::Display for RotationViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite => write!(f, "rotation has non-finite entries"),
            Self::NotOrthonormal { max_deviation } => {
                write!(f, "R^T R deviates from identity by {max_deviation:e}")
            }
            Self::Determinant { det } => write!(f, "det(R) = {det} (expected +1)"),
        }
    }
}

/// A point or displacement in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs_diff(self, o: Vec3) -> f64 {
        let d = self - o;
        d.x.abs().max(d.y.abs()).max(d.z.abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0[r * 3 + c]
    }

    pub fn scaled(&self, s: f64) -> Mat3 {
        Mat3(self.0.map(|v| v * s))
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| self.at(r, k) * o.at(k, c)).sum();
            }
        }
        Mat3(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
    }

    pub fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
    }

    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let u = axis * (1.0 / axis.norm());
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3([
            c + u.x * u.x * t,
            u.x * u.y * t - u.z * s,
            u.x * u.z * t + u.y * s,
            u.y * u.x * t + u.z * s,
            c + u.y * u.y * t,
            u.y * u.z * t - u.x * s,
            u.z * u.x * t - u.y * s,
            u.z * u.y * t + u.x * s,
            c + u.z * u.z * t,
        ])
    }
}

/// Accepts `m` iff it is orthonormal and has determinant +1, both within
/// [`ROTATION_TOLERANCE`].
pub fn validate_rotation(m: &Mat3) -> Result<(), RotationViolation> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(RotationViolation::NonFinite);
    }
    let rtr = m.transpose().mul_mat(m);
    let max_deviation = rtr
        .0
        .iter()
        .zip(Mat3::IDENTITY.0.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_deviation > ROTATION_TOLERANCE {
        return Err(RotationViolation::NotOrthonormal { max_deviation });
    }
    let det = m.det();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(RotationViolation::Determinant { det });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceId {
    Master,
    Sub1,
    Sub2,
}

impl DeviceId {
    pub const ALL: [DeviceId; 3] = [DeviceId::Master, DeviceId::Sub1, DeviceId::Sub2];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceId::Master => "master",
            DeviceId::Sub1 => "sub1",
            DeviceId::Sub2 => "sub2",
        }
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceId {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master" => Ok(DeviceId::Master),
            "sub1" => Ok(DeviceId::Sub1),
            "sub2" => Ok(DeviceId::Sub2),
            other => Err(GeometryError::Format(format!("unknown device {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Camera {
    Color,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameId {
    pub device: DeviceId,
    pub camera: Camera,
}

impl FrameId {
    pub const MASTER_COLOR: FrameId = FrameId::color(DeviceId::Master);

    pub const fn color(device: DeviceId) -> Self {
        Self { device, camera: Camera::Color }
    }

    pub const fn depth(device: DeviceId) -> Self {
        Self { device, camera: Camera::Depth }
    }

    /// The six frames of a three-device rig.
    pub fn all() -> [FrameId; 6] {
        let d = DeviceId::ALL;
        [
            Self::color(d[0]),
            Self::depth(d[0]),
            Self::color(d[1]),
            Self::depth(d[1]),
            Self::color(d[2]),
            Self::depth(d[2]),
        ]
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cam = match self.camera {
            Camera::Color => "color",
            Camera::Depth => "depth",
        };
        write!(f, "{}.{}", self.device, cam)
    }
}

impl FromStr for FrameId {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (dev, cam) = s
            .split_once('.')
            .ok_or_else(|| GeometryError::Format(format!("bad frame {s:?}")))?;
        let device = dev.parse()?;
        let camera = match cam {
            "color" => Camera::Color,
            "depth" => Camera::Depth,
            other => return Err(GeometryError::Format(format!("unknown camera {other:?}"))),
        };
        Ok(FrameId { device, camera })
    }
}

/// Maps points expressed in `from` into `to` as `R p + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
    from: FrameId,
    to: FrameId,
}

impl RigidTransform {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        from: FrameId,
        to: FrameId,
    ) -> Result<Self, GeometryError> {
        validate_rotation(&rotation).map_err(GeometryError::InvalidRotation)?;
        if !translation.is_finite() {
            return Err(GeometryError::NonFiniteTranslation);
        }
        if from == to {
            return Err(GeometryError::SameFrame(from));
        }
        Ok(Self { rotation, translation, from, to })
    }

    /// Identity between two distinct frames (used for degenerate rigs in tests).
    pub fn identity(from: FrameId, to: FrameId) -> Self {
        Self { rotation: Mat3::IDENTITY, translation: Vec3::ZERO, from, to }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn from_frame(&self) -> FrameId {
        self.from
    }

    pub fn to_frame(&self) -> FrameId {
        self.to
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// `(R^T, -R^T T)` with the frames swapped.
    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
            from: self.to,
            to: self.from,
        }
    }

    /// `self ∘ inner`: applies `inner` first. Requires `inner.to == self.from`.
    pub fn compose(&self, inner: &RigidTransform) -> Result<RigidTransform, GeometryError> {
        if inner.to != self.from {
            return Err(GeometryError::FrameMismatch { outer_from: self.from, inner_to: inner.to });
        }
        Ok(RigidTransform {
            rotation: self.rotation.mul_mat(&inner.rotation),
            translation: self.rotation.mul_vec(inner.translation) + self.translation,
            from: inner.from,
            to: self.to,
        })
    }

    fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }
}

/// How the subordinate-device chain treats the master's depth/color offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    /// `R_S2M (R_S2 p + T_S2) + T_S2M + R_M T_M`, including the extra offset term.
    Paper,
    /// Plain frame composition `R_S2M (R_S2 p + T_S2) + T_S2M`.
    #[default]
    Strict,
}

impl FromStr for ChainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(ChainMode::Paper),
            "strict" => Ok(ChainMode::Strict),
            other => Err(format!("unknown chain mode {other:?} (expected paper|strict)")),
        }
    }
}

/// Stereo calibrations of a rig. Stored transforms are looked up in either
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    transforms: Vec<RigidTransform>,
    index: HashMap<(FrameId, FrameId), usize>,
}

impl CalibrationSet {
    /// Builds the set and checks that every frame reaches master color.
    pub fn new(transforms: Vec<RigidTransform>) -> Result<Self, GeometryError> {
        let mut index = HashMap::new();
        for (i, t) in transforms.iter().enumerate() {
            index.insert((t.from, t.to), i);
        }
        let set = Self { transforms, index };
        set.check_reachability()?;
        Ok(set)
    }

    pub fn transforms(&self) -> &[RigidTransform] {
        &self.transforms
    }

    fn check_reachability(&self) -> Result<(), GeometryError> {
        let mut seen = vec![FrameId::MASTER_COLOR];
        let mut queue = VecDeque::from([FrameId::MASTER_COLOR]);
        while let Some(f) = queue.pop_front() {
            for t in &self.transforms {
                for (a, b) in [(t.from, t.to), (t.to, t.from)] {
                    if a == f && !seen.contains(&b) {
                        seen.push(b);
                        queue.push_back(b);
                    }
                }
            }
        }
        match FrameId::all().into_iter().find(|f| !seen.contains(f)) {
            Some(f) => Err(GeometryError::Unreachable(f)),
            None => Ok(()),
        }
    }

    /// Transform from `from` to `to`, inverting a stored transform if needed.
    pub fn get(&self, from: FrameId, to: FrameId) -> Result<RigidTransform, GeometryError> {
        if let Some(&i) = self.index.get(&(from, to)) {
            return Ok(self.transforms[i]);
        }
        if let Some(&i) = self.index.get(&(to, from)) {
            return Ok(self.transforms[i].invert());
        }
        Err(GeometryError::MissingPair(from, to))
    }

    /// Single transform from `device`'s depth frame into the master color frame.
    ///
    /// For the master this is its own depth-to-color calibration in both
    /// modes. For a subordinate, `Paper` adds `R_M T_M` to the translation
    /// of the `Strict` composition and leaves the rotation untouched.
    pub fn chain_to_master(
        &self,
        device: DeviceId,
        mode: ChainMode,
    ) -> Result<RigidTransform, GeometryError> {
        let depth_to_color = self.get(FrameId::depth(device), FrameId::color(device))?;
        if device == DeviceId::Master {
            return Ok(depth_to_color);
        }
        let color_to_master = self.get(FrameId::color(device), FrameId::MASTER_COLOR)?;
        let strict = color_to_master.compose(&depth_to_color)?;
        match mode {
            ChainMode::Strict => Ok(strict),
            ChainMode::Paper => {
                let offset = self.master_offset()?;
                Ok(strict.with_translation(strict.translation + offset))
            }
        }
    }

    /// `R_M T_M` of the master depth-to-color calibration.
    pub fn master_offset(&self) -> Result<Vec3, GeometryError> {
        let m = self.get(FrameId::depth(DeviceId::Master), FrameId::MASTER_COLOR)?;
        Ok(m.rotation.mul_vec(m.translation))
    }

    pub fn to_json(&self, provenance: Option<&crate::io::Provenance>) -> String {
        let mut out = String::from("{\n  \"format\": \"skelgait-calibration\",\n  \"version\": 1,\n");
        if let Some(p) = provenance {
            out.push_str(&format!(
                "  \"config_hash\": \"{}\",\n  \"seed\": {},\n",
                p.config_hash, p.seed
            ));
        }
        out.push_str("  \"transforms\": [\n");
        for (i, t) in self.transforms.iter().enumerate() {
            let r: Vec<String> = t.rotation.0.iter().map(|v| fmt_num(*v)).collect();
            let tr: Vec<String> = t.translation.to_array().iter().map(|v| fmt_num(*v)).collect();
            out.push_str(&format!(
                "    {{\"from\": \"{}\", \"to\": \"{}\", \"R\": [{}], \"T\": [{}]}}{}\n",
                t.from,
                t.to,
                r.join(", "),
                tr.join(", "),
                if i + 1 == self.transforms.len() { "" } else { "," }
            ));
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let doc: CalibrationDoc =
            serde_json::from_str(text).map_err(|e| GeometryError::Format(e.to_string()))?;
        if doc.format != "skelgait-calibration" || doc.version != 1 {
            return Err(GeometryError::Format(format!(
                "unsupported document {} v{}",
                doc.format, doc.version
            )));
        }
        let transforms = doc
            .transforms
            .into_iter()
            .map(|e| {
                RigidTransform::new(
                    Mat3(e.rotation),
                    Vec3::from_array(e.translation),
                    e.from.parse()?,
                    e.to.parse()?,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(transforms)
    }
}

/// 17 significant digits, scientific notation (valid JSON number).
fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDoc {
    format: String,
    version: u32,
    #[serde(default)]
    #[allow(dead_code)]
    config_hash: Option<String>,
    #[serde(default)]
    #[allow(dead_code)]
    seed: Option<u64>,
    transforms: Vec<TransformEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformEntry {
    from: String,
    to: String,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    #[serde(rename = "T")]
    translation: [f64; 3],
}
