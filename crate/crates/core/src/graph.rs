//! Spatio-temporal gait graphs: the partitioned, normalized adjacency stack
//! and the conversion of dual-skeleton sequences into fixed-length tensors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{self, DualSkeleton, NUM_JOINTS, PELVIS};

/// Number of spatial partitions (self, centripetal, centrifugal).
pub const NUM_PARTITIONS: usize = 3;
/// Added to every row sum before the inverse square root.
pub const DEFAULT_ALPHA: f64 = 0.001;
pub const CHANNELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph is not connected (node {0} unreachable from the center)")]
    Disconnected(usize),
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("output length must be at least 2, got {0}")]
    BadLength(usize),
    #[error("alpha must be > 0")]
    BadAlpha,
}

/// Undirected graph with a designated center node (the center of gravity).
#[derive(Debug, Clone, PartialEq)]
pub struct GaitGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
    hops: Vec<usize>,
}

impl GaitGraph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, center: usize) -> Result<Self, GraphError> {
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= num_nodes || *b >= num_nodes) {
            return Err(GraphError::EdgeOutOfRange(a, b, num_nodes));
        }
        let mut hops = vec![usize::MAX; num_nodes];
        hops[center] = 0;
        let mut queue = VecDeque::from([center]);
        while let Some(n) = queue.pop_front() {
            for &(a, b) in &edges {
                for (x, y) in [(a, b), (b, a)] {
                    if x == n && hops[y] == usize::MAX {
                        hops[y] = hops[n] + 1;
                        queue.push_back(y);
                    }
                }
            }
        }
        if let Some(n) = hops.iter().position(|h| *h == usize::MAX) {
            return Err(GraphError::Disconnected(n));
        }
        Ok(Self { num_nodes, edges, center, hops })
    }

    /// The 16-joint bone tree centered on the pelvis.
    pub fn skeleton() -> Self {
        Self::new(NUM_JOINTS, skeleton::bone_edges().collect(), PELVIS).expect("bone tree is connected")
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn hops(&self) -> &[usize] {
        &self.hops
    }

    /// Dense adjacency with self-loops.
    pub fn adjacency_with_self_loops(&self) -> Vec<f64> {
        let v = self.num_nodes;
        let mut a = vec![0.0; v * v];
        for i in 0..v {
            a[i * v + i] = 1.0;
        }
        for &(x, y) in &self.edges {
            a[x * v + y] = 1.0;
            a[y * v + x] = 1.0;
        }
        a
    }
}

/// `K_v` dense row-major `V x V` 0/1 matrices; `mats[k][i*V + j]` is 1 when
/// vertex `j` lies in partition `k` of vertex `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyStack {
    pub num_nodes: usize,
    pub mats: Vec<Vec<f64>>,
}

/// Spatial-configuration partitioning by hop distance to the center: `j`
/// goes to partition 0 when it is `i` itself (or equally far from the
/// center), 1 when closer to the center, 2 when farther.
pub fn build_adjacency(g: &GaitGraph) -> AdjacencyStack {
    let v = g.num_nodes;
    let full = g.adjacency_with_self_loops();
    let mut mats = vec![vec![0.0; v * v]; NUM_PARTITIONS];
    for i in 0..v {
        for j in 0..v {
            if full[i * v + j] == 0.0 {
                continue;
            }
            let k = match g.hops[j].cmp(&g.hops[i]) {
                std::cmp::Ordering::Equal => 0,
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => 2,
            };
            mats[k][i * v + j] = 1.0;
        }
    }
    AdjacencyStack { num_nodes: v, mats }
}

/// `Λ_k^{-1/2} A_k Λ_k^{-1/2}` with `Λ_k^{ii} = Σ_j A_k^{ij} + α`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub num_nodes: usize,
    pub mats: Vec<Vec<f64>>,
    pub degrees: Vec<Vec<f64>>,
}

impl NormalizedAdjacency {
    pub fn skeleton_default() -> Self {
        normalize(&build_adjacency(&GaitGraph::skeleton()), DEFAULT_ALPHA).expect("alpha > 0")
    }

    pub fn num_partitions(&self) -> usize {
        self.mats.len()
    }
}

pub fn normalize(a: &AdjacencyStack, alpha: f64) -> Result<NormalizedAdjacency, GraphError> {
    if !(alpha > 0.0) {
        return Err(GraphError::BadAlpha);
    }
    let v = a.num_nodes;
    let mut mats = Vec::with_capacity(a.mats.len());
    let mut degrees = Vec::with_capacity(a.mats.len());
    for m in &a.mats {
        let deg: Vec<f64> = (0..v).map(|i| m[i * v..(i + 1) * v].iter().sum::<f64>() + alpha).collect();
        let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut n = vec![0.0; v * v];
        for i in 0..v {
            for j in 0..v {
                n[i * v + j] = inv[i] * m[i * v + j] * inv[j];
            }
        }
        mats.push(n);
        degrees.push(deg);
    }
    Ok(NormalizedAdjacency { num_nodes: v, mats, degrees })
}

/// Channel-major `(C=3, T, V=16)` values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitTensor {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl GaitTensor {
    pub fn zeros(frames: usize) -> Self {
        Self { frames, values: vec![0.0; CHANNELS * frames * NUM_JOINTS] }
    }

    pub fn index(&self, c: usize, t: usize, v: usize) -> usize {
        (c * self.frames + t) * NUM_JOINTS + v
    }

    pub fn get(&self, c: usize, t: usize, v: usize) -> f64 {
        self.values[self.index(c, t, v)]
    }
}

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }
}

impl ChannelStats {
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a GaitTensor>) -> Self {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut n = 0usize;
        for t in tensors {
            let per = t.frames * NUM_JOINTS;
            for c in 0..CHANNELS {
                for x in &t.values[c * per..(c + 1) * per] {
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
            n += per;
        }
        if n == 0 {
            return Self::default();
        }
        let mut s = Self::default();
        for c in 0..CHANNELS {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            s.mean[c] = m;
            s.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        s
    }

    pub fn apply(&self, t: &mut GaitTensor) {
        let per = t.frames * NUM_JOINTS;
        for c in 0..CHANNELS {
            for x in &mut t.values[c * per..(c + 1) * per] {
                *x = (*x - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Linear resampling of `n` samples to `t_out` positions. Index arithmetic is
/// done in integers so the first and last samples are reproduced exactly.
fn resample<const W: usize>(frames: &[[[f64; 3]; W]], t_out: usize) -> Vec<[[f64; 3]; W]> {
    let n = frames.len();
    (0..t_out)
        .map(|k| {
            let num = k * (n - 1);
            let (i, rem) = (num / (t_out - 1), num % (t_out - 1));
            if rem == 0 {
                return frames[i];
            }
            let frac = rem as f64 / (t_out - 1) as f64;
            let (a, b) = (&frames[i], &frames[i + 1]);
            let mut out = [[0.0; 3]; W];
            for v in 0..W {
                for c in 0..3 {
                    out[v][c] = a[v][c] + (b[v][c] - a[v][c]) * frac;
                }
            }
            out
        })
        .collect()
}

fn to_tensor(frames: &[[[f64; 3]; NUM_JOINTS]]) -> GaitTensor {
    let mut t = GaitTensor::zeros(frames.len());
    for (ti, f) in frames.iter().enumerate() {
        for v in 0..NUM_JOINTS {
            for c in 0..CHANNELS {
                let idx = t.index(c, ti, v);
                t.values[idx] = f[v][c];
            }
        }
    }
    t
}

/// Builds the real-stream (pelvis-centered joints) and pseudo-stream tensors,
/// resampled to `t_out` frames. Standardization is applied separately.
pub fn sequence_to_tensors(
    frames: &[DualSkeleton],
    t_out: usize,
) -> Result<(GaitTensor, GaitTensor), GraphError> {
    if frames.len() < 2 {
        return Err(GraphError::TooFewFrames(frames.len()));
    }
    if t_out < 2 {
        return Err(GraphError::BadLength(t_out));
    }
    let real: Vec<[[f64; 3]; NUM_JOINTS]> = frames
        .iter()
        .map(|d| {
            let root = d.real.joint(PELVIS);
            d.real.0.map(|p| (p - root).to_array())
        })
        .collect();
    let pseudo: Vec<[[f64; 3]; NUM_JOINTS]> = frames.iter().map(|d| d.pseudo).collect();
    Ok((to_tensor(&resample(&real, t_out)), to_tensor(&resample(&pseudo, t_out))))
}
