//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every op computes its value eagerly and stores whatever its backward pass
//! needs. [`Tape::backward`] walks the tape in reverse, so gradients are
//! accumulated in a fixed order and runs are bit-reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::NetError;
use crate::loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Partition matrices in the engine's precision, `K` row-major `V x V` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyData<F> {
    pub partitions: usize,
    pub nodes: usize,
    pub data: Vec<F>,
}

impl<F: Real> AdjacencyData<F> {
    pub fn from_normalized(a: &crate::graph::NormalizedAdjacency) -> Self {
        Self {
            partitions: a.mats.len(),
            nodes: a.num_nodes,
            data: a.mats.iter().flatten().map(|x| F::of(*x)).collect(),
        }
    }

    fn block(&self, k: usize) -> &[F] {
        let vv = self.nodes * self.nodes;
        &self.data[k * vv..(k + 1) * vv]
    }
}

/// Batch-norm statistics returned by a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    SpatialConv { x: Var, w: Var, b: Var, adj: Arc<AdjacencyData<F>>, y: Vec<F> },
    TemporalConv { x: Var, w: Var, b: Var, stride: usize, cols: Vec<F> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, batch: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: F },
    ConcatChannels { a: Var, b: Var },
    ConcatBatch { a: Var, b: Var },
    SliceBatch { x: Var, start: usize },
    GatherJoints { x: Var, idx: Vec<usize> },
    Pool { x: Var, k: Var },
    Linear { x: Var, w: Var, b: Var },
    ConcatFeatures { parts: Vec<Var> },
    SumSquares { x: Var },
    /// Scalar loss whose local gradients were computed during the forward.
    Loss { inputs: Vec<(Var, Vec<F>)> },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    branches: Option<Vec<usize>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T, NetError> {
    Err(NetError::Shape(msg))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), branches: None }
    }

    /// Starts recording which side of every non-smooth point (ReLU sign,
    /// hardest positive/negative, hinge activity) the forward pass took.
    pub fn record_branches(&mut self) {
        self.branches = Some(Vec::new());
    }

    pub fn branches(&self) -> Option<&[usize]> {
        self.branches.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf for a stored parameter. Repeated uses within one tape share the
    /// same node, so every consumer's gradient lands in one accumulator.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// `Σ_k W_k (x A_k)` plus a per-channel bias. `x: (N, Cin, T, V)`,
    /// `w: (Cout, K*Cin)` with partition-major columns, `b: (Cout)`.
    pub fn spatial_conv(&mut self, x: Var, w: Var, b: Var, adj: &Arc<AdjacencyData<F>>) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("spatial_conv: input must be 4-D, got {xs:?}"));
        }
        let (n, cin, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let kk = adj.partitions;
        if v != adj.nodes {
            return shape_err(format!("spatial_conv: {v} joints vs {}-node adjacency", adj.nodes));
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != kk * cin {
            return shape_err(format!("spatial_conv: weight {ws:?} for {kk} partitions x {cin} channels"));
        }
        let cout = ws[0];
        if self.shape(b) != [cout] {
            return shape_err(format!("spatial_conv: bias {:?} for {cout} channels", self.shape(b)));
        }
        let tv = t * v;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let per_y = kk * cin * tv;
        let mut y = vec![F::zero(); n * per_y];
        let mut out = vec![F::zero(); n * cout * tv];
        for s in 0..n {
            let xn = &xd[s * cin * tv..(s + 1) * cin * tv];
            let yn = &mut y[s * per_y..(s + 1) * per_y];
            for k in 0..kk {
                F::gemm(cin * t, v, v, xn, v, 1, adj.block(k), v, 1, F::zero(), &mut yn[k * cin * tv..], v, 1);
            }
            let on = &mut out[s * cout * tv..(s + 1) * cout * tv];
            for (co, row) in on.chunks_mut(tv).enumerate() {
                row.iter_mut().for_each(|o| *o = bd[co]);
            }
            F::gemm(cout, kk * cin, tv, wd, kk * cin, 1, yn, tv, 1, F::one(), on, tv, 1);
        }
        let needs = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(&[n, cout, t, v], out),
            Op::SpatialConv { x, w, b, adj: adj.clone(), y },
            needs,
        ))
    }

    /// Convolution over time with symmetric zero padding `(width-1)/2`.
    /// `w: (Cout, Cin, width)`, `b: (Cout)`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NetError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[1] != xs[1] || stride == 0 {
            return shape_err(format!("temporal_conv: input {xs:?}, kernel {ws:?}, stride {stride}"));
        }
        let (n, cin, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, width) = (ws[0], ws[2]);
        if width % 2 == 0 {
            return shape_err(format!("temporal_conv: kernel width {width} must be odd"));
        }
        if self.shape(b) != [cout] {
            return shape_err(format!("temporal_conv: bias {:?} for {cout} channels", self.shape(b)));
        }
        let pad = (width - 1) / 2;
        if t + 2 * pad < width {
            return shape_err(format!("temporal_conv: {t} frames too short for width {width}"));
        }
        let t_out = (t + 2 * pad - width) / stride + 1;
        let rows = cin * width;
        let cols_n = t_out * v;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut cols = vec![F::zero(); n * rows * cols_n];
        let mut out = vec![F::zero(); n * cout * cols_n];
        for s in 0..n {
            let xn = &xd[s * cin * t * v..(s + 1) * cin * t * v];
            let cn = &mut cols[s * rows * cols_n..(s + 1) * rows * cols_n];
            for ci in 0..cin {
                for d in 0..width {
                    let row = &mut cn[(ci * width + d) * cols_n..(ci * width + d + 1) * cols_n];
                    for to in 0..t_out {
                        let ti = (to * stride + d) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            let src = &xn[(ci * t + ti as usize) * v..(ci * t + ti as usize + 1) * v];
                            row[to * v..(to + 1) * v].copy_from_slice(src);
                        }
                    }
                }
            }
            let on = &mut out[s * cout * cols_n..(s + 1) * cout * cols_n];
            for (co, row) in on.chunks_mut(cols_n).enumerate() {
                row.iter_mut().for_each(|o| *o = bd[co]);
            }
            F::gemm(cout, rows, cols_n, wd, rows, 1, cn, cols_n, 1, F::one(), on, cols_n, 1);
        }
        let needs = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, cout, t_out, v], out), Op::TemporalConv { x, w, b, stride, cols }, needs))
    }

    /// Per-channel normalization over `(N, T, V)`. With `running = None` the
    /// batch statistics are used and returned; otherwise the given
    /// `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var, Option<BatchStats<F>>), NetError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return shape_err(format!("batch_norm: input {xs:?}"));
        }
        let (n, c, inner) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * inner;
        let xd = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm: running statistics size".into());
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for smp in 0..n {
                        s += xd[(smp * c + ch) * inner..(smp * c + ch + 1) * inner].iter().copied().sum();
                    }
                    let mu = s / F::of(m as f64);
                    let mut q = F::zero();
                    for smp in 0..n {
                        for &val in &xd[(smp * c + ch) * inner..(smp * c + ch + 1) * inner] {
                            q += (val - mu) * (val - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / F::of(m as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { *v * F::of(m as f64 / (m - 1) as f64) } else { *v })
                    .collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let needs = self.ng(&[x, gamma, beta]);
        let batch = stats.is_some();
        let var_out = self.push(Tensor::new(&xs, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch }, needs);
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(F::zero())).collect());
        if let Some(b) = &mut self.branches {
            b.extend(t.data().iter().map(|v| usize::from(*v > F::zero())));
        }
        let needs = self.ng(&[x]);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect());
        let needs = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| *v * s).collect());
        let needs = self.ng(&[x]);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// Concatenation along dimension 1 (channels), `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("concat_channels: {sa:?} vs {sb:?}"));
        }
        let inner: usize = sa[2..].iter().product();
        let (pa, pb) = (sa[1] * inner, sb[1] * inner);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&da[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&db[s * pb..(s + 1) * pb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let needs = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out), Op::ConcatChannels { a, b }, needs))
    }

    /// Concatenation along the batch dimension, `a` first.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return shape_err(format!("concat_batch: {sa:?} vs {sb:?}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let needs = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data), Op::ConcatBatch { a, b }, needs))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] {
            return shape_err(format!("slice_batch: {start}+{len} of {}", s[0]));
        }
        let out = self.value(x).slice_batch(start, len);
        let needs = self.ng(&[x]);
        Ok(self.push(out, Op::SliceBatch { x, start }, needs))
    }

    /// Selects joints (last dimension) by index.
    pub fn gather_joints(&mut self, x: Var, idx: &[usize]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || idx.iter().any(|i| *i >= s[3]) {
            return shape_err(format!("gather_joints: {idx:?} from {s:?}"));
        }
        let v = s[3];
        let rows = s[0] * s[1] * s[2];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            out.extend(idx.iter().map(|&j| d[r * v + j]));
        }
        let needs = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], s[2], idx.len()], out),
            Op::GatherJoints { x, idx: idx.to_vec() },
            needs,
        ))
    }

    /// `out[n, c] = Σ_{t,j} x[n, c, t, j] k[t, j]`.
    pub fn pool(&mut self, x: Var, k: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(k) != [s[2], s[3]] {
            return shape_err(format!("pool: input {s:?}, kernel {:?}", self.shape(k)));
        }
        let (rows, inner) = (s[0] * s[1], s[2] * s[3]);
        let mut out = vec![F::zero(); rows];
        F::gemm(rows, inner, 1, self.value(x).data(), inner, 1, self.value(k).data(), 1, 1, F::zero(), &mut out, 1, 1);
        let needs = self.ng(&[x, k]);
        Ok(self.push(Tensor::new(&[s[0], s[1]], out), Op::Pool { x, k }, needs))
    }

    /// `x w^T + b` with `x: (N, Din)`, `w: (Dout, Din)`, `b: (Dout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return shape_err(format!("linear: input {xs:?}, weight {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bd = self.value(b).data();
        let mut out: Vec<F> = (0..n).flat_map(|_| bd.iter().copied()).collect();
        F::gemm(n, din, dout, self.value(x).data(), din, 1, self.value(w).data(), 1, din, F::one(), &mut out, dout, 1);
        let needs = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, needs))
    }

    /// Concatenates `(N, D_i)` matrices along the feature dimension in order.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var, NetError> {
        let n = self.shape(parts[0])[0];
        if parts.iter().any(|p| self.shape(*p).len() != 2 || self.shape(*p)[0] != n) {
            return shape_err("concat_features: parts must be (N, D) with equal N".into());
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut out = Vec::with_capacity(n * total);
        for s in 0..n {
            for p in parts {
                let d = self.shape(*p)[1];
                out.extend_from_slice(&self.value(*p).data()[s * d..(s + 1) * d]);
            }
        }
        let needs = self.ng(parts);
        Ok(self.push(Tensor::new(&[n, total], out), Op::ConcatFeatures { parts: parts.to_vec() }, needs))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().map(|v| *v * *v).sum();
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, needs)
    }

    /// Batch-hard triplet loss over embeddings `(N, D)`.
    pub fn batch_hard_triplet(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var, NetError> {
        let s = self.shape(emb).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("triplet: embeddings {s:?} for {} labels", labels.len()));
        }
        let (l, g) = loss::batch_hard_triplet_with_grad(self.value(emb).data(), s[1], labels, F::of(margin))?;
        if self.branches.is_some() {
            let picks = loss::batch_hard_triplet_branches(self.value(emb).data(), s[1], labels, F::of(margin));
            self.branches.get_or_insert_default().extend(picks);
        }
        let needs = self.ng(&[emb]);
        Ok(self.push(Tensor::scalar(l), Op::Loss { inputs: vec![(emb, g)] }, needs))
    }

    /// Additive angular margin loss with class centers `w: (classes, D)`.
    pub fn arcface(&mut self, emb: Var, w: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var, NetError> {
        let (s, ws) = (self.shape(emb).to_vec(), self.shape(w).to_vec());
        if s.len() != 2 || ws.len() != 2 || s[1] != ws[1] || s[0] != labels.len() {
            return shape_err(format!("arcface: embeddings {s:?}, centers {ws:?}"));
        }
        let r = loss::arcface_with_grad(
            self.value(emb).data(),
            self.value(w).data(),
            s[1],
            labels,
            F::of(scale),
            F::of(margin),
        )?;
        let needs = self.ng(&[emb, w]);
        Ok(self.push(Tensor::scalar(r.loss), Op::Loss { inputs: vec![(emb, r.grad_emb), (w, r.grad_centers)] }, needs))
    }

    fn acc(&mut self, v: Var, g: &[F]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += *x),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let len = node.value.len();
        f(node.grad.get_or_insert_with(|| vec![F::zero(); len]));
    }

    /// Back-propagates from the scalar `root`, leaving gradients on every node
    /// that depends on a variable or parameter.
    pub fn backward(&mut self, root: Var) -> Result<(), NetError> {
        if root.0 >= self.nodes.len() {
            return Err(NetError::Backward("target was not recorded on this tape".into()));
        }
        if self.value(root).len() != 1 {
            return Err(NetError::Backward(format!("target must be scalar, got {:?}", self.shape(root))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<F>, gout: &[F]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        match op {
            Op::Leaf => {}
            Op::SpatialConv { x, w, b, adj, y } => {
                let xs = self.shape(*x).to_vec();
                let (n, cin, t, v) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = out_shape[1];
                let kk = adj.partitions;
                let tv = t * v;
                let per_y = kk * cin * tv;
                let wd = self.value(*w).data().to_vec();
                let mut gw = vec![F::zero(); cout * kk * cin];
                let mut gb = vec![F::zero(); cout];
                let mut gx = vec![F::zero(); n * cin * tv];
                let mut gy = vec![F::zero(); per_y];
                for s in 0..n {
                    let go = &gout[s * cout * tv..(s + 1) * cout * tv];
                    let yn = &y[s * per_y..(s + 1) * per_y];
                    F::gemm(cout, tv, kk * cin, go, tv, 1, yn, 1, tv, F::one(), &mut gw, kk * cin, 1);
                    for (co, row) in go.chunks(tv).enumerate() {
                        gb[co] += row.iter().copied().sum();
                    }
                    F::gemm(kk * cin, cout, tv, &wd, 1, kk * cin, go, tv, 1, F::zero(), &mut gy, tv, 1);
                    let gxn = &mut gx[s * cin * tv..(s + 1) * cin * tv];
                    for k in 0..kk {
                        F::gemm(cin * t, v, v, &gy[k * cin * tv..], v, 1, adj.block(k), 1, v, F::one(), gxn, v, 1);
                    }
                }
                self.acc(*x, &gx);
                self.acc(*w, &gw);
                self.acc(*b, &gb);
            }
            Op::TemporalConv { x, w, b, stride, cols } => {
                let xs = self.shape(*x).to_vec();
                let (n, cin, t, v) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(*w).to_vec();
                let (cout, width) = (ws[0], ws[2]);
                let pad = (width - 1) / 2;
                let t_out = out_shape[2];
                let rows = cin * width;
                let cols_n = t_out * v;
                let wd = self.value(*w).data().to_vec();
                let mut gw = vec![F::zero(); cout * rows];
                let mut gb = vec![F::zero(); cout];
                let mut gx = vec![F::zero(); n * cin * t * v];
                let mut gcols = vec![F::zero(); rows * cols_n];
                for s in 0..n {
                    let go = &gout[s * cout * cols_n..(s + 1) * cout * cols_n];
                    let cn = &cols[s * rows * cols_n..(s + 1) * rows * cols_n];
                    F::gemm(cout, cols_n, rows, go, cols_n, 1, cn, 1, cols_n, F::one(), &mut gw, rows, 1);
                    for (co, row) in go.chunks(cols_n).enumerate() {
                        gb[co] += row.iter().copied().sum();
                    }
                    F::gemm(rows, cout, cols_n, &wd, 1, rows, go, cols_n, 1, F::zero(), &mut gcols, cols_n, 1);
                    let gxn = &mut gx[s * cin * t * v..(s + 1) * cin * t * v];
                    for ci in 0..cin {
                        for d in 0..width {
                            let row = &gcols[(ci * width + d) * cols_n..(ci * width + d + 1) * cols_n];
                            for to in 0..t_out {
                                let ti = (to * stride + d) as isize - pad as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    let dst = &mut gxn[(ci * t + ti as usize) * v..(ci * t + ti as usize + 1) * v];
                                    dst.iter_mut().zip(&row[to * v..(to + 1) * v]).for_each(|(a, g)| *a += *g);
                                }
                            }
                        }
                    }
                }
                self.acc(*x, &gx);
                self.acc(*w, &gw);
                self.acc(*b, &gb);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (n, c, inner) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                let m = F::of((n * inner) as f64);
                let g = self.value(*gamma).data().to_vec();
                let mut gg = vec![F::zero(); c];
                let mut gbeta = vec![F::zero(); c];
                let mut sum_dxhat = vec![F::zero(); c];
                let mut sum_dxhat_xhat = vec![F::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for i in off..off + inner {
                            gg[ch] += gout[i] * xhat[i];
                            gbeta[ch] += gout[i];
                            let dxh = gout[i] * g[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[i];
                        }
                    }
                }
                let mut gx = vec![F::zero(); gout.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for i in off..off + inner {
                            let dxh = gout[i] * g[ch];
                            gx[i] = if *batch {
                                inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                self.acc(*x, &gx);
                self.acc(*gamma, &gg);
                self.acc(*beta, &gbeta);
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let gx: Vec<F> = xd.iter().zip(gout).map(|(v, g)| if *v > F::zero() { *g } else { F::zero() }).collect();
                self.acc(*x, &gx);
            }
            Op::Add { a, b } => {
                self.acc(*a, gout);
                self.acc(*b, gout);
            }
            Op::Scale { x, s } => {
                let gx: Vec<F> = gout.iter().map(|g| *g * *s).collect();
                self.acc(*x, &gx);
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let inner: usize = sa[2..].iter().product();
                let (pa, pb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * pa);
                let mut gb = Vec::with_capacity(sa[0] * pb);
                for s in 0..sa[0] {
                    let base = s * (pa + pb);
                    ga.extend_from_slice(&gout[base..base + pa]);
                    gb.extend_from_slice(&gout[base + pa..base + pa + pb]);
                }
                self.acc(*a, &ga);
                self.acc(*b, &gb);
            }
            Op::ConcatBatch { a, b } => {
                let la = self.value(*a).len();
                self.acc(*a, &gout[..la]);
                self.acc(*b, &gout[la..]);
            }
            Op::SliceBatch { x, start } => {
                let per: usize = out_shape[1..].iter().product();
                let off = start * per;
                self.acc_with(*x, |g| {
                    g[off..off + gout.len()].iter_mut().zip(gout).for_each(|(a, b)| *a += *b);
                });
            }
            Op::GatherJoints { x, idx } => {
                let v = self.shape(*x)[3];
                let j = idx.len();
                self.acc_with(*x, |g| {
                    for (r, row) in gout.chunks(j).enumerate() {
                        for (q, &src) in idx.iter().enumerate() {
                            g[r * v + src] += row[q];
                        }
                    }
                });
            }
            Op::Pool { x, k } => {
                let s = self.shape(*x).to_vec();
                let (rows, inner) = (s[0] * s[1], s[2] * s[3]);
                let kd = self.value(*k).data().to_vec();
                let xd = self.value(*x).data();
                let mut gk = vec![F::zero(); inner];
                F::gemm(1, rows, inner, gout, rows, 1, xd, inner, 1, F::zero(), &mut gk, inner, 1);
                let mut gx = vec![F::zero(); rows * inner];
                F::gemm(rows, 1, inner, gout, 1, 1, &kd, inner, 1, F::zero(), &mut gx, inner, 1);
                self.acc(*x, &gx);
                self.acc(*k, &gk);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = out_shape[1];
                let mut gx = vec![F::zero(); n * din];
                let mut gw = vec![F::zero(); dout * din];
                F::gemm(n, dout, din, gout, dout, 1, self.value(*w).data(), din, 1, F::zero(), &mut gx, din, 1);
                F::gemm(dout, n, din, gout, 1, dout, self.value(*x).data(), din, 1, F::zero(), &mut gw, din, 1);
                let mut gb = vec![F::zero(); dout];
                for row in gout.chunks(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
                }
                self.acc(*x, &gx);
                self.acc(*w, &gw);
                self.acc(*b, &gb);
            }
            Op::ConcatFeatures { parts } => {
                let n = out_shape[0];
                let total = out_shape[1];
                let mut off = 0;
                for p in parts {
                    let d = self.shape(*p)[1];
                    let mut gp = Vec::with_capacity(n * d);
                    for s in 0..n {
                        gp.extend_from_slice(&gout[s * total + off..s * total + off + d]);
                    }
                    self.acc(*p, &gp);
                    off += d;
                }
            }
            Op::SumSquares { x } => {
                let g0 = gout[0];
                let gx: Vec<F> = self.value(*x).data().iter().map(|v| F::of(2.0) * *v * g0).collect();
                self.acc(*x, &gx);
            }
            Op::Loss { inputs } => {
                let g0 = gout[0];
                for (v, local) in inputs {
                    let gx: Vec<F> = local.iter().map(|l| *l * g0).collect();
                    self.acc(*v, &gx);
                }
            }
        }
    }

    /// Adds the gradients of all parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, var) in ids {
            if let Some(g) = self.grad(*var) {
                store.get_mut(*id).grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::ParamKind;

    #[test]
    fn sum_squares_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", ParamKind::Weight, Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let l = tape.sum_squares(v);
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.get(p).grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_branch_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]));
        let d = tape.detach(x);
        let s = tape.add(x, d).unwrap();
        let l = tape.sum_squares(s);
        tape.backward(l).unwrap();
        // d/dx (x + c)^2 with c = x held constant = 2 (x + c) = 4x
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.backward(Var(0)).is_err());
        let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", ParamKind::Weight, Tensor::new(&[1], vec![3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum_squares(s);
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut store);
        // (2p)^2 -> 8p
        assert_eq!(store.get(p).grad.data(), &[24.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 3]));
        let y = tape.constant(Tensor::zeros(&[1, 2, 5, 3]));
        assert!(tape.concat_channels(x, y).is_err());
        let k = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.pool(x, k).is_err());
    }
}
