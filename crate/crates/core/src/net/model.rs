use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamKind, ParamStore};
use super::tape::{AdjacencyData, Tape, Var};
use super::tensor::{Real, Tensor};
use super::NetError;
use crate::graph::{build_adjacency, normalize, ChannelStats, GaitGraph, CHANNELS};
use crate::jrpm::{JrpmHead, JrpmOutput, PyramidSpec};
use crate::skeleton::NUM_JOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub const fn new(cin: usize, cout: usize, stride: usize) -> Self {
        Self { cin, cout, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channel_plan: Vec<BlockSpec>,
    pub temporal_width: usize,
    /// Width of each per-group projection; the embedding has five times this.
    pub embedding_dim: usize,
    /// Frames per input sequence after resampling.
    pub frames: usize,
    pub alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub first_block_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channel_plan: vec![
                BlockSpec::new(3, 32, 1),
                BlockSpec::new(32, 32, 1),
                BlockSpec::new(32, 64, 2),
                BlockSpec::new(64, 64, 1),
                BlockSpec::new(64, 128, 2),
                BlockSpec::new(128, 128, 1),
            ],
            temporal_width: 9,
            embedding_dim: 64,
            frames: 60,
            alpha: crate::graph::DEFAULT_ALPHA,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            first_block_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        let Some(first) = self.channel_plan.first() else {
            return bad("channel plan is empty".into());
        };
        if first.cin != CHANNELS {
            return bad(format!("first block takes {} channels, inputs have {CHANNELS}", first.cin));
        }
        for (i, w) in self.channel_plan.windows(2).enumerate() {
            if w[0].cout != w[1].cin {
                return bad(format!("block {} outputs {} channels but block {} takes {}", i, w[0].cout, i + 1, w[1].cin));
            }
        }
        if self.channel_plan.iter().any(|b| b.stride == 0 || b.cout == 0) {
            return bad("strides and widths must be positive".into());
        }
        if self.temporal_width.is_multiple_of(2) {
            return bad(format!("temporal width {} must be odd", self.temporal_width));
        }
        if self.embedding_dim == 0 || self.frames == 0 {
            return bad("embedding_dim and frames must be positive".into());
        }
        if !(self.alpha > 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("alpha, bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Frames left after the strided blocks.
    pub fn output_frames(&self) -> usize {
        self.channel_plan.iter().fold(self.frames, |t, b| (t - 1) / b.stride + 1)
    }

    pub fn output_channels(&self) -> usize {
        self.channel_plan.last().map_or(0, |b| b.cout)
    }

    /// Length of the concatenated embedding.
    pub fn embedding_len(&self) -> usize {
        PyramidSpec::standard().groups.len() * self.embedding_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics, with gradients still recorded.
    FrozenBn,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub enum Residual {
    None,
    Identity,
    Project { w: ParamId, b: ParamId, bn: BnParams },
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub spec: BlockSpec,
    pub gcn_w: ParamId,
    pub gcn_b: ParamId,
    pub bn1: BnParams,
    pub tcn_w: ParamId,
    pub tcn_b: ParamId,
    pub bn2: BnParams,
    pub residual: Residual,
}

/// Shared block stack applied to both streams.
#[derive(Debug, Clone)]
pub struct SiameseStgcn<F> {
    pub blocks: Vec<BlockParams>,
    pub adjacency: Arc<AdjacencyData<F>>,
}

struct BnUpdate<F> {
    mean: ParamId,
    var: ParamId,
    stats: super::tape::BatchStats<F>,
}

struct Ctx<'a, F: Real> {
    store: &'a ParamStore<F>,
    mode: ForwardMode,
    eps: F,
    updates: Vec<BnUpdate<F>>,
}

impl<F: Real> Ctx<'_, F> {
    fn bn(&mut self, tape: &mut Tape<F>, x: Var, p: &BnParams) -> Result<Var, NetError> {
        let gamma = tape.param(self.store, p.gamma);
        let beta = tape.param(self.store, p.beta);
        let running = match self.mode {
            ForwardMode::Train => None,
            _ => Some((self.store.value(p.running_mean).data(), self.store.value(p.running_var).data())),
        };
        let (y, stats) = tape.batch_norm(x, gamma, beta, running, self.eps)?;
        if let Some(stats) = stats {
            self.updates.push(BnUpdate { mean: p.running_mean, var: p.running_var, stats });
        }
        Ok(y)
    }
}

fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_f64(shape, &data)
}

fn add_bn<F: Real>(store: &mut ParamStore<F>, prefix: &str, c: usize) -> BnParams {
    BnParams {
        gamma: store.add(format!("{prefix}.gamma"), ParamKind::Weight, Tensor::full(&[c], F::one())),
        beta: store.add(format!("{prefix}.beta"), ParamKind::Weight, Tensor::zeros(&[c])),
        running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c])),
        running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(&[c], F::one())),
    }
}

impl<F: Real> SiameseStgcn<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, NetError> {
        cfg.validate()?;
        let graph = GaitGraph::skeleton();
        let adj = normalize(&build_adjacency(&graph), cfg.alpha).map_err(|e| NetError::Config(e.to_string()))?;
        let k = adj.num_partitions();
        let width = cfg.temporal_width;
        let mut blocks = Vec::with_capacity(cfg.channel_plan.len());
        for (i, spec) in cfg.channel_plan.iter().enumerate() {
            let p = format!("block{i}");
            let (cin, cout) = (spec.cin, spec.cout);
            let gcn_w = store.add(
                format!("{p}.gcn.weight"),
                ParamKind::Weight,
                uniform(rng, &[cout, k * cin], (6.0 / (k * cin) as f64).sqrt()),
            );
            let gcn_b = store.add(format!("{p}.gcn.bias"), ParamKind::Weight, Tensor::zeros(&[cout]));
            let bn1 = add_bn(store, &format!("{p}.bn1"), cout);
            let tcn_w = store.add(
                format!("{p}.tcn.weight"),
                ParamKind::Weight,
                uniform(rng, &[cout, cout, width], (6.0 / (cout * width) as f64).sqrt()),
            );
            let tcn_b = store.add(format!("{p}.tcn.bias"), ParamKind::Weight, Tensor::zeros(&[cout]));
            let bn2 = add_bn(store, &format!("{p}.bn2"), cout);
            let residual = if i == 0 && !cfg.first_block_residual {
                Residual::None
            } else if cin == cout && spec.stride == 1 {
                Residual::Identity
            } else {
                Residual::Project {
                    w: store.add(
                        format!("{p}.res.weight"),
                        ParamKind::Weight,
                        uniform(rng, &[cout, cin, 1], (6.0 / cin as f64).sqrt()),
                    ),
                    b: store.add(format!("{p}.res.bias"), ParamKind::Weight, Tensor::zeros(&[cout])),
                    bn: add_bn(store, &format!("{p}.res_bn"), cout),
                }
            };
            blocks.push(BlockParams { spec: *spec, gcn_w, gcn_b, bn1, tcn_w, tcn_b, bn2, residual });
        }
        Ok(Self { blocks, adjacency: Arc::new(AdjacencyData::from_normalized(&adj)) })
    }

    fn run(&self, tape: &mut Tape<F>, ctx: &mut Ctx<'_, F>, mut x: Var) -> Result<Var, NetError> {
        for b in &self.blocks {
            let gw = tape.param(ctx.store, b.gcn_w);
            let gb = tape.param(ctx.store, b.gcn_b);
            let h = tape.spatial_conv(x, gw, gb, &self.adjacency)?;
            let h = ctx.bn(tape, h, &b.bn1)?;
            let h = tape.relu(h);
            let tw = tape.param(ctx.store, b.tcn_w);
            let tb = tape.param(ctx.store, b.tcn_b);
            let h = tape.temporal_conv(h, tw, tb, b.spec.stride)?;
            let h = ctx.bn(tape, h, &b.bn2)?;
            let h = match &b.residual {
                Residual::None => h,
                Residual::Identity => tape.add(h, x)?,
                Residual::Project { w, b: bias, bn } => {
                    let rw = tape.param(ctx.store, *w);
                    let rb = tape.param(ctx.store, *bias);
                    let r = tape.temporal_conv(x, rw, rb, b.spec.stride)?;
                    let r = ctx.bn(tape, r, bn)?;
                    tape.add(h, r)?
                }
            };
            x = tape.relu(h);
        }
        Ok(x)
    }

    /// Runs both streams through the shared blocks as one stacked batch and
    /// returns `(F_Jst, F_Ast)`.
    fn forward_pair(&self, tape: &mut Tape<F>, ctx: &mut Ctx<'_, F>, f_j: Var, f_a: Var) -> Result<(Var, Var), NetError> {
        let (sj, sa) = (tape.shape(f_j).to_vec(), tape.shape(f_a).to_vec());
        if sj != sa || sj.len() != 4 || sj[1] != CHANNELS || sj[3] != NUM_JOINTS {
            return Err(NetError::Shape(format!("siamese input: real {sj:?}, pseudo {sa:?}")));
        }
        let n = sj[0];
        let stacked = tape.concat_batch(f_j, f_a)?;
        let out = self.run(tape, ctx, stacked)?;
        Ok((tape.slice_batch(out, 0, n)?, tape.slice_batch(out, n, n)?))
    }
}

pub struct ModelOutput {
    pub f_jst: Var,
    pub f_ast: Var,
    pub f_sst: Var,
    pub head: JrpmOutput,
}

impl ModelOutput {
    pub fn embedding(&self) -> Var {
        self.head.embedding
    }
}

/// Backbone, pyramid head and (optionally) the arcface class centers, all
/// stored in one parameter store.
#[derive(Debug, Clone)]
pub struct GaitModel<F: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub backbone: SiameseStgcn<F>,
    pub head: JrpmHead,
    pub centers: Option<ParamId>,
    /// Input standardization for the real and pseudo streams.
    pub standardizer: [ChannelStats; 2],
}

impl<F: Real> GaitModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = SiameseStgcn::new(&mut store, &config, &mut rng)?;
        let head = JrpmHead::new(
            &mut store,
            PyramidSpec::standard(),
            2 * config.output_channels(),
            config.output_frames(),
            config.embedding_dim,
            &mut rng,
        );
        Ok(Self { config, store, backbone, head, centers: None, standardizer: [ChannelStats::default(); 2] })
    }

    /// Registers arcface class centers for `classes` training identities.
    pub fn add_arcface_head(&mut self, classes: usize, seed: u64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a5cf);
        let d = self.config.embedding_len();
        let id = self.store.add("arcface.centers", ParamKind::LossHead, uniform(&mut rng, &[classes, d], 1.0));
        self.centers = Some(id);
        id
    }

    pub fn num_parameters(&self) -> usize {
        self.store.count(ParamKind::Weight)
    }

    /// Full forward from the two input streams `(N, 3, T, 16)`.
    pub fn forward(&mut self, tape: &mut Tape<F>, f_j: Var, f_a: Var, mode: ForwardMode) -> Result<ModelOutput, NetError> {
        let (out, updates) = self.forward_inner(tape, f_j, f_a, mode)?;
        let m = F::of(self.config.bn_momentum);
        for u in updates {
            for (param, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let r = self.store.get_mut(param).value.data_mut();
                r.iter_mut().zip(batch).for_each(|(r, b)| *r = (F::one() - m) * *r + m * *b);
            }
        }
        Ok(out)
    }

    /// Inference forward; running statistics are used and left unchanged.
    pub fn forward_eval(&self, tape: &mut Tape<F>, f_j: Var, f_a: Var) -> Result<ModelOutput, NetError> {
        Ok(self.forward_inner(tape, f_j, f_a, ForwardMode::Eval)?.0)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<F>,
        f_j: Var,
        f_a: Var,
        mode: ForwardMode,
    ) -> Result<(ModelOutput, Vec<BnUpdate<F>>), NetError> {
        let mut ctx = Ctx { store: &self.store, mode, eps: F::of(self.config.bn_eps), updates: Vec::new() };
        let (f_jst, f_ast) = self.backbone.forward_pair(tape, &mut ctx, f_j, f_a)?;
        let f_sst = tape.concat_channels(f_jst, f_ast)?;
        let head = self.head.forward(tape, &self.store, f_sst)?;
        Ok((ModelOutput { f_jst, f_ast, f_sst, head }, ctx.updates))
    }

    /// Embeddings `(N, 5·D_emb)` for stacked input tensors, without gradients.
    pub fn embed(&self, f_j: Tensor<F>, f_a: Tensor<F>) -> Result<Tensor<F>, NetError> {
        let mut tape = Tape::new();
        let (j, a) = (tape.constant(f_j), tape.constant(f_a));
        let out = self.forward_eval(&mut tape, j, a)?;
        Ok(tape.value(out.embedding()).clone())
    }

    pub fn cast<G: Real>(&self) -> GaitModel<G> {
        GaitModel {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: SiameseStgcn {
                blocks: self.backbone.blocks.clone(),
                adjacency: Arc::new(AdjacencyData {
                    partitions: self.backbone.adjacency.partitions,
                    nodes: self.backbone.adjacency.nodes,
                    data: self.backbone.adjacency.data.iter().map(|v| G::of(v.f64())).collect(),
                }),
            },
            head: self.head.clone(),
            centers: self.centers,
            standardizer: self.standardizer,
        }
    }
}

/// Trainable parameters of the backbone and pyramid head for `config`.
/// Running statistics and the arcface centers are not counted.
pub fn count_parameters(config: &ModelConfig) -> Result<usize, NetError> {
    Ok(GaitModel::<f32>::new(config.clone(), 0)?.num_parameters())
}
