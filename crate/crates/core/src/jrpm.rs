//! Joints Relationship Pyramid Mapping: physiological joint groups at three
//! scales, one learned joint x time pooling kernel per group, and an
//! independent affine projection per group.

use rand::Rng;
use thiserror::Error;

use crate::net::params::{ParamId, ParamKind, ParamStore};
use crate::net::tape::{Tape, Var};
use crate::net::tensor::{Real, Tensor};
use crate::net::NetError;
use crate::skeleton::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JrpmError {
    #[error("pyramid scale {0}: groups overlap at joint {1}")]
    Overlap(usize, usize),
    #[error("pyramid scale {scale}: covers {covered:?}, expected {expected:?}")]
    Coverage { scale: usize, covered: Vec<usize>, expected: Vec<usize> },
    #[error("joint index {0} out of range")]
    OutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: &'static str,
    pub scale: usize,
    pub joints: Vec<usize>,
}

/// Group layout in output order: whole body; upper and lower body; the two
/// contralateral arm+leg pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSpec {
    pub groups: Vec<Group>,
}

pub const LIMB_JOINTS: [usize; 12] = [
    L_SHOULDER, L_ELBOW, L_WRIST, R_SHOULDER, R_ELBOW, R_WRIST, L_HIP, L_KNEE, L_ANKLE, R_HIP, R_KNEE, R_ANKLE,
];

impl PyramidSpec {
    pub fn standard() -> Self {
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        let spec = Self {
            groups: vec![
                Group { name: "g1_body", scale: 1, joints: (0..NUM_JOINTS).collect() },
                Group {
                    name: "g2_upper",
                    scale: 2,
                    joints: sorted(vec![HEAD, NECK, NAVEL, L_SHOULDER, L_ELBOW, L_WRIST, R_SHOULDER, R_ELBOW, R_WRIST]),
                },
                Group {
                    name: "g2_lower",
                    scale: 2,
                    joints: sorted(vec![PELVIS, L_HIP, L_KNEE, L_ANKLE, R_HIP, R_KNEE, R_ANKLE]),
                },
                Group {
                    name: "g3_larm_rleg",
                    scale: 3,
                    joints: sorted(vec![L_SHOULDER, L_ELBOW, L_WRIST, R_HIP, R_KNEE, R_ANKLE]),
                },
                Group {
                    name: "g3_rarm_lleg",
                    scale: 3,
                    joints: sorted(vec![R_SHOULDER, R_ELBOW, R_WRIST, L_HIP, L_KNEE, L_ANKLE]),
                },
            ],
        };
        spec.validate().expect("standard pyramid is valid");
        spec
    }

    /// Scales 1 and 2 must partition all joints; scale 3 must partition the
    /// twelve limb joints.
    pub fn validate(&self) -> Result<(), JrpmError> {
        for scale in 1..=3 {
            let mut seen = [false; NUM_JOINTS];
            for g in self.groups.iter().filter(|g| g.scale == scale) {
                for &j in &g.joints {
                    if j >= NUM_JOINTS {
                        return Err(JrpmError::OutOfRange(j));
                    }
                    if seen[j] {
                        return Err(JrpmError::Overlap(scale, j));
                    }
                    seen[j] = true;
                }
            }
            let covered: Vec<usize> = (0..NUM_JOINTS).filter(|j| seen[*j]).collect();
            let mut expected: Vec<usize> = if scale == 3 { LIMB_JOINTS.to_vec() } else { (0..NUM_JOINTS).collect() };
            expected.sort_unstable();
            if covered != expected {
                return Err(JrpmError::Coverage { scale, covered, expected });
            }
        }
        Ok(())
    }

    pub fn total_joints(&self) -> usize {
        self.groups.iter().map(|g| g.joints.len()).sum()
    }
}

/// Slices `F_Sst (N, C, T, 16)` into one local feature per group.
pub fn split<F: Real>(tape: &mut Tape<F>, f_sst: Var, spec: &PyramidSpec) -> Result<Vec<Var>, NetError> {
    if tape.shape(f_sst).get(3) != Some(&NUM_JOINTS) {
        return Err(NetError::Shape(format!("jrpm split: expected {NUM_JOINTS} joints, got {:?}", tape.shape(f_sst))));
    }
    spec.groups.iter().map(|g| tape.gather_joints(f_sst, &g.joints)).collect()
}

#[derive(Debug, Clone)]
pub struct JrpmHead {
    pub spec: PyramidSpec,
    pub kernels: Vec<ParamId>,
    pub proj_weights: Vec<ParamId>,
    pub proj_biases: Vec<ParamId>,
    pub embedding_dim: usize,
}

pub struct JrpmOutput {
    pub locals: Vec<Var>,
    pub pooled: Vec<Var>,
    pub groups: Vec<Var>,
    pub embedding: Var,
}

impl JrpmHead {
    /// Registers pooling kernels (initialized to uniform averaging) and
    /// projections for `channels`-wide features of `frames` time steps.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        spec: PyramidSpec,
        channels: usize,
        frames: usize,
        embedding_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut kernels = Vec::new();
        let mut proj_weights = Vec::new();
        let mut proj_biases = Vec::new();
        let bound = 1.0 / (channels as f64).sqrt();
        for g in &spec.groups {
            let j = g.joints.len();
            kernels.push(store.add(
                format!("jrpm.{}.kernel", g.name),
                ParamKind::Weight,
                Tensor::full(&[frames, j], F::of(1.0 / (j * frames) as f64)),
            ));
            let w: Vec<f64> = (0..embedding_dim * channels).map(|_| rng.random_range(-bound..bound)).collect();
            proj_weights.push(store.add(
                format!("jrpm.{}.proj.weight", g.name),
                ParamKind::Weight,
                Tensor::from_f64(&[embedding_dim, channels], &w),
            ));
            proj_biases.push(store.add(
                format!("jrpm.{}.proj.bias", g.name),
                ParamKind::Weight,
                Tensor::zeros(&[embedding_dim]),
            ));
        }
        Self { spec, kernels, proj_weights, proj_biases, embedding_dim }
    }

    /// Split, pool and project; the embedding concatenates the projected
    /// groups in pyramid order.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, f_sst: Var) -> Result<JrpmOutput, NetError> {
        let locals = split(tape, f_sst, &self.spec)?;
        let mut pooled = Vec::with_capacity(locals.len());
        let mut groups = Vec::with_capacity(locals.len());
        for (i, local) in locals.iter().enumerate() {
            let k = tape.param(store, self.kernels[i]);
            let p = tape.pool(*local, k)?;
            let w = tape.param(store, self.proj_weights[i]);
            let b = tape.param(store, self.proj_biases[i]);
            pooled.push(p);
            groups.push(tape.linear(p, w, b)?);
        }
        let embedding = tape.concat_features(&groups)?;
        Ok(JrpmOutput { locals, pooled, groups, embedding })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_groups_match_hand_lists() {
        let s = PyramidSpec::standard();
        let lists: Vec<&[usize]> = s.groups.iter().map(|g| g.joints.as_slice()).collect();
        assert_eq!(lists[0], (0..16).collect::<Vec<_>>().as_slice());
        assert_eq!(lists[1], &[1, 2, 3, 4, 5, 6, 7, 8, 15]);
        assert_eq!(lists[2], &[0, 9, 10, 11, 12, 13, 14]);
        assert_eq!(lists[3], &[3, 4, 5, 12, 13, 14]);
        assert_eq!(lists[4], &[6, 7, 8, 9, 10, 11]);
        assert_eq!(s.total_joints(), 44);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = PyramidSpec::standard();
        s.groups[2].joints.push(HEAD);
        assert_eq!(s.validate(), Err(JrpmError::Overlap(2, HEAD)));
        let mut s = PyramidSpec::standard();
        s.groups[4].joints.pop();
        assert!(matches!(s.validate(), Err(JrpmError::Coverage { scale: 3, .. })));
    }

    #[test]
    fn scale_one_slice_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 16).map(|i| i as f64).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 4, 16], data));
        let locals = split(&mut tape, x, &PyramidSpec::standard()).unwrap();
        assert_eq!(tape.value(locals[0]), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[1, 1, 1, 15]));
        assert!(split(&mut tape, bad, &PyramidSpec::standard()).is_err());
    }
}
