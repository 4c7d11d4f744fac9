//! Fusion loss: batch-hard triplet on the concatenated embedding plus an
//! additive-angular-margin (arcface) classifier, mixed with weight λ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::tensor::Real;
use crate::protocol::{Condition, View};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no anchor has both a positive and a negative")]
    NoValidTriplet,
    #[error("degenerate embedding: sample {0} has zero norm")]
    ZeroEmbedding(usize),
    #[error("degenerate class center {0}: zero norm")]
    ZeroCenter(usize),
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Embeddings with their identity, view and condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub dim: usize,
    /// Row-major `(N, dim)`.
    pub values: Vec<f64>,
    pub ids: Vec<usize>,
    pub views: Vec<View>,
    pub conditions: Vec<Condition>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    /// Average per-group triplet losses instead of using the full embedding.
    pub per_group: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.2, per_group: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcfaceConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcfaceConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.5 }
    }
}

impl ArcfaceConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.scale > 0.0) {
            return Err(LossError::Config("arcface scale must be > 0".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(LossError::Config("arcface margin must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionLossConfig {
    pub lambda: f64,
    pub triplet: TripletConfig,
    pub arcface: ArcfaceConfig,
}

impl Default for FusionLossConfig {
    fn default() -> Self {
        Self { lambda: 0.9, triplet: TripletConfig::default(), arcface: ArcfaceConfig::default() }
    }
}

impl FusionLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::Config("lambda must lie in [0, 1]".into()));
        }
        if !(self.triplet.margin > 0.0) {
            return Err(LossError::Config("triplet margin must be > 0".into()));
        }
        self.arcface.validate()
    }
}

/// `sqrt(Σ_k (a_k - b_k)^2)`, summed in index order.
pub fn euclidean<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s += d * d;
    }
    s.sqrt()
}

fn hardest_pairs<F: Real>(emb: &[F], dim: usize, labels: &[usize]) -> (Vec<F>, Vec<(usize, usize, usize)>) {
    let n = labels.len();
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let mut dist = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = euclidean(row(i), row(j));
        }
    }
    let mut picks = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dist[a * n + j] > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dist[a * n + j] < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            picks.push((a, p, q));
        }
    }
    (dist, picks)
}

/// Flattened `(anchor, positive, negative, hinge active)` per selected
/// triplet.
pub fn batch_hard_triplet_branches<F: Real>(emb: &[F], dim: usize, labels: &[usize], margin: F) -> Vec<usize> {
    let n = labels.len();
    let (dist, picks) = hardest_pairs(emb, dim, labels);
    picks
        .iter()
        .flat_map(|&(a, p, q)| [a, p, q, usize::from((margin + dist[a * n + p]) - dist[a * n + q] > F::zero())])
        .collect()
}

/// Batch-hard triplet loss and its gradient with respect to the embeddings.
///
/// Per anchor, the farthest same-identity sample and the nearest
/// other-identity sample are selected (first index on ties) and the hinge
/// `max(0, (margin + d_p) - d_n)` is averaged over anchors that have both.
pub fn batch_hard_triplet_with_grad<F: Real>(
    emb: &[F],
    dim: usize,
    labels: &[usize],
    margin: F,
) -> Result<(F, Vec<F>), LossError> {
    let n = labels.len();
    let (dist, picks) = hardest_pairs(emb, dim, labels);
    if picks.is_empty() {
        return Err(LossError::NoValidTriplet);
    }
    let count = F::of(picks.len() as f64);
    let mut total = F::zero();
    let mut grad = vec![F::zero(); emb.len()];
    for &(a, p, q) in &picks {
        let h = (margin + dist[a * n + p]) - dist[a * n + q];
        if h <= F::zero() {
            continue;
        }
        total += h;
        // +d(a,p) - d(a,q); zero-distance pairs contribute no gradient
        for (other, sign) in [(p, F::one()), (q, -F::one())] {
            let d = dist[a * n + other];
            if d > F::zero() {
                for k in 0..dim {
                    let u = (emb[a * dim + k] - emb[other * dim + k]) / d * sign / count;
                    grad[a * dim + k] += u;
                    grad[other * dim + k] -= u;
                }
            }
        }
    }
    Ok((total / count, grad))
}

pub struct ArcfaceOutput<F> {
    pub loss: F,
    pub grad_emb: Vec<F>,
    pub grad_centers: Vec<F>,
}

const COS_CLAMP: f64 = 1e-7;

fn normalize_rows<F: Real>(x: &[F], dim: usize, err: fn(usize) -> LossError) -> Result<(Vec<F>, Vec<F>), LossError> {
    let mut out = vec![F::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (i, (src, dst)) in x.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
        let nrm = src.iter().map(|v| *v * *v).sum::<F>().sqrt();
        if nrm == F::zero() {
            return Err(err(i));
        }
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s / nrm);
        norms.push(nrm);
    }
    Ok((out, norms))
}

/// Backward of `u = v / |v|` for every row.
fn normalize_backward<F: Real>(g: &[F], unit: &[F], norms: &[F], dim: usize) -> Vec<F> {
    let mut out = vec![F::zero(); g.len()];
    for (i, nrm) in norms.iter().enumerate() {
        let gu = &g[i * dim..(i + 1) * dim];
        let u = &unit[i * dim..(i + 1) * dim];
        let dot: F = gu.iter().zip(u).map(|(a, b)| *a * *b).sum();
        for k in 0..dim {
            out[i * dim + k] = (gu[k] - dot * u[k]) / *nrm;
        }
    }
    out
}

/// Arcface cross-entropy: cosine logits between normalized embeddings and
/// normalized class centers, `s cos(θ + m)` for the true class and `s cos θ`
/// otherwise, averaged over the batch.
pub fn arcface_with_grad<F: Real>(
    emb: &[F],
    centers: &[F],
    dim: usize,
    labels: &[usize],
    scale: F,
    margin: F,
) -> Result<ArcfaceOutput<F>, LossError> {
    let n = labels.len();
    let classes = centers.len() / dim;
    if let Some(&label) = labels.iter().find(|l| **l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    let (e, en) = normalize_rows(emb, dim, LossError::ZeroEmbedding)?;
    let (w, wn) = normalize_rows(centers, dim, LossError::ZeroCenter)?;
    let lo = F::of(-1.0 + COS_CLAMP);
    let hi = F::of(1.0 - COS_CLAMP);
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    let mut total = F::zero();
    let mut g_cos = vec![F::zero(); n * classes];
    for i in 0..n {
        let ei = &e[i * dim..(i + 1) * dim];
        let mut logits = vec![F::zero(); classes];
        let mut dlogit_dcos = vec![F::zero(); classes];
        for c in 0..classes {
            let raw: F = ei.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| *a * *b).sum();
            let clamped = raw < lo || raw > hi;
            let cos = raw.max(lo).min(hi);
            if c == labels[i] {
                let sin = (F::one() - cos * cos).sqrt();
                logits[c] = scale * (cos * cos_m - sin * sin_m);
                dlogit_dcos[c] = if clamped { F::zero() } else { scale * (cos_m + sin_m * cos / sin) };
            } else {
                logits[c] = scale * cos;
                dlogit_dcos[c] = if clamped { F::zero() } else { scale };
            }
        }
        let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|z| (*z - mx).exp()).collect();
        let z: F = exps.iter().copied().sum();
        total += z.ln() + mx - logits[labels[i]];
        let inv_n = F::one() / F::of(n as f64);
        for c in 0..classes {
            let p = exps[c] / z;
            let t = if c == labels[i] { F::one() } else { F::zero() };
            g_cos[i * classes + c] = (p - t) * inv_n * dlogit_dcos[c];
        }
    }
    let mut g_e = vec![F::zero(); e.len()];
    let mut g_w = vec![F::zero(); w.len()];
    for i in 0..n {
        for c in 0..classes {
            let g = g_cos[i * classes + c];
            if g == F::zero() {
                continue;
            }
            for k in 0..dim {
                g_e[i * dim + k] += g * w[c * dim + k];
                g_w[c * dim + k] += g * e[i * dim + k];
            }
        }
    }
    Ok(ArcfaceOutput {
        loss: total / F::of(n as f64),
        grad_emb: normalize_backward(&g_e, &e, &en, dim),
        grad_centers: normalize_backward(&g_w, &w, &wn, dim),
    })
}

pub fn batch_hard_triplet(b: &EmbeddingBatch, cfg: &TripletConfig) -> Result<f64, LossError> {
    batch_hard_triplet_with_grad(&b.values, b.dim, &b.ids, cfg.margin).map(|r| r.0)
}

/// `centers` is the row-major `(classes, dim)` class-weight matrix.
pub fn arcface(b: &EmbeddingBatch, centers: &[f64], cfg: &ArcfaceConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    arcface_with_grad(&b.values, centers, b.dim, &b.ids, cfg.scale, cfg.margin).map(|r| r.loss)
}

/// `λ L_tri + (1 - λ) L_arc`.
pub fn combine(lambda: f64, triplet: f64, arc: f64) -> f64 {
    lambda * triplet + (1.0 - lambda) * arc
}

pub fn fusion_loss(b: &EmbeddingBatch, centers: &[f64], cfg: &FusionLossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(combine(cfg.lambda, batch_hard_triplet(b, &cfg.triplet)?, arcface(b, centers, &cfg.arcface)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: Vec<f64>, dim: usize, ids: Vec<usize>) -> EmbeddingBatch {
        let n = ids.len();
        EmbeddingBatch { dim, values, ids, views: vec![View::Deg0; n], conditions: vec![Condition::Lcl; n] }
    }

    #[test]
    fn separated_clusters_zero_loss() {
        let b = batch(vec![0.0, 0.0, 10.0, 10.0], 1, vec![0, 0, 1, 1]);
        assert_eq!(batch_hard_triplet(&b, &TripletConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn collapsed_embeddings_give_margin() {
        let b = batch(vec![1.0; 8], 2, vec![0, 0, 1, 1]);
        assert!((batch_hard_triplet(&b, &TripletConfig::default()).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn no_valid_anchor() {
        let b = batch(vec![0.0, 1.0], 1, vec![0, 1]);
        assert_eq!(batch_hard_triplet(&b, &TripletConfig::default()), Err(LossError::NoValidTriplet));
    }

    #[test]
    fn arcface_closed_form() {
        let b = batch(vec![1.0, 0.0], 2, vec![0]);
        let centers = [1.0, 0.0, 0.0, 1.0];
        let l = arcface(&b, &centers, &ArcfaceConfig { scale: 1.0, margin: 0.0 }).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-6);
        assert!(l > 0.0);
    }

    #[test]
    fn arcface_errors() {
        let b = batch(vec![0.0, 0.0], 2, vec![0]);
        assert_eq!(arcface(&b, &[1.0, 0.0], &ArcfaceConfig::default()), Err(LossError::ZeroEmbedding(0)));
        let b = batch(vec![1.0, 0.0], 2, vec![3]);
        assert!(matches!(arcface(&b, &[1.0, 0.0], &ArcfaceConfig::default()), Err(LossError::LabelOutOfRange { .. })));
        assert!(ArcfaceConfig { scale: 1.0, margin: 2.0 }.validate().is_err());
    }

    #[test]
    fn fusion_mix() {
        assert!((combine(0.9, 1.0, 2.0) - 1.1).abs() < 1e-15);
        let b = batch(vec![0.3, -1.0, 0.5, 0.2, -0.7, 0.1, 0.9, 0.4], 2, vec![0, 0, 1, 1]);
        let centers = [0.2, 1.0, -1.0, 0.3];
        let cfg = FusionLossConfig { lambda: 1.0, ..Default::default() };
        assert_eq!(fusion_loss(&b, &centers, &cfg).unwrap(), batch_hard_triplet(&b, &cfg.triplet).unwrap());
        let cfg0 = FusionLossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(fusion_loss(&b, &centers, &cfg0).unwrap(), arcface(&b, &centers, &cfg0.arcface).unwrap());
        assert!(FusionLossConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    }
}
