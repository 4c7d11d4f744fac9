//! Acceptance suite: one PASS/FAIL line per criterion check, nonzero exit on
//! any failure. Every expected value here comes from an oracle written in
//! this file.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use skelgait::fusion::{align_frame, fuse, FusionPolicy, JointSlot, SkeletonFrame32, NUM_SOURCE_JOINTS};
use skelgait::geometry::{CalibrationSet, ChainMode, DeviceId, FrameId, Mat3, RigidTransform, Vec3};
use skelgait::graph::NormalizedAdjacency;
use skelgait::io::Provenance;
use skelgait::jrpm::{JrpmHead, PyramidSpec, LIMB_JOINTS};
use skelgait::loss::{self, ArcfaceConfig, EmbeddingBatch, FusionLossConfig, TripletConfig};
use skelgait::net::checkpoint;
use skelgait::net::gradcheck::{check_params, DEFAULT_EPS};
use skelgait::net::{AdjacencyData, BlockSpec, ForwardMode, GaitModel, ModelConfig, ParamKind, ParamStore, Tape, Tensor};
use skelgait::pipeline::PipelineOptions;
use skelgait::protocol::{
    evaluate, extract, load_samples, smooth, train, BatchPlan, Condition, Metric, Sample, TrainConfig, View,
};
use skelgait::skeleton::{compute_height, compute_sb_shr, select_joints, Skeleton16, NUM_JOINTS, PARENT, *};
use skelgait::synth::{build_synthetic_manifest, gen_identity, simulate_walk, OcclusionModel, SynthConfig, VirtualRig};

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, criterion: usize, name: &str, pass: bool, detail: String) {
        println!("{} [{criterion}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }

    fn time(&mut self, criterion: usize, elapsed: Duration, limit: Duration) {
        self.check(
            criterion,
            "runtime",
            elapsed < limit,
            format!("{:.2} s (limit {:.0} s)", elapsed.as_secs_f64(), limit.as_secs_f64()),
        );
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    Mat3::axis_angle(Vec3::from_array(axis), rng.random_range(-PI..PI))
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_transform(rng: &mut ChaCha8Rng, from: FrameId, to: FrameId) -> RigidTransform {
    RigidTransform::new(random_rotation(rng), random_vec(rng, 5000.0), from, to).unwrap()
}

/// `R p` written out row by row.
fn matvec(r: &Mat3, p: Vec3) -> Vec3 {
    let m = r.0;
    Vec3::new(
        m[0] * p.x + m[1] * p.y + m[2] * p.z,
        m[3] * p.x + m[4] * p.y + m[5] * p.z,
        m[6] * p.x + m[7] * p.y + m[8] * p.z,
    )
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, c) = (FrameId::depth(DeviceId::Sub1), FrameId::color(DeviceId::Sub1), FrameId::MASTER_COLOR);
    let (mut round, mut comp) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let t = random_transform(&mut rng, a, b);
        let u = random_transform(&mut rng, b, c);
        let p = random_vec(&mut rng, 5000.0);
        round = round.max(t.apply(t.invert().apply(p)).max_abs_diff(p));
        round = round.max(t.invert().apply(t.apply(p)).max_abs_diff(p));
        let pointwise = matvec(u.rotation(), matvec(t.rotation(), p) + t.translation()) + u.translation();
        comp = comp.max(u.compose(&t).unwrap().apply(p).max_abs_diff(pointwise));
    }
    rep.check(1, "apply/invert round trip", round < 1e-9, format!("max error {round:.3e} mm over 10^4 transforms"));
    rep.check(1, "compose vs pointwise", comp < 1e-9, format!("max error {comp:.3e} mm over 10^4 transforms"));

    let mut exact = true;
    let mut point_err = 0.0f64;
    for _ in 0..1000 {
        let mut ts = Vec::new();
        for d in DeviceId::ALL {
            ts.push(random_transform(&mut rng, FrameId::depth(d), FrameId::color(d)));
        }
        ts.push(random_transform(&mut rng, FrameId::color(DeviceId::Sub1), FrameId::MASTER_COLOR));
        ts.push(random_transform(&mut rng, FrameId::color(DeviceId::Sub2), FrameId::MASTER_COLOR));
        let offset = matvec(ts[0].rotation(), ts[0].translation());
        let cal = CalibrationSet::new(ts).unwrap();
        for d in [DeviceId::Sub1, DeviceId::Sub2] {
            let paper = cal.chain_to_master(d, ChainMode::Paper).unwrap();
            let strict = cal.chain_to_master(d, ChainMode::Strict).unwrap();
            exact &= paper.rotation() == strict.rotation();
            exact &= paper.translation() == strict.translation() + cal.master_offset().unwrap();
            exact &= cal.master_offset().unwrap().max_abs_diff(offset) < 1e-9;
            let p = random_vec(&mut rng, 3000.0);
            point_err = point_err.max((paper.apply(p) - strict.apply(p)).max_abs_diff(offset));
        }
        let m_paper = cal.chain_to_master(DeviceId::Master, ChainMode::Paper).unwrap();
        exact &= m_paper == cal.chain_to_master(DeviceId::Master, ChainMode::Strict).unwrap();
    }
    rep.check(
        1,
        "paper - strict = R_M T_M",
        exact && point_err < 1e-9,
        format!("translation difference exact on 1000 rigs; pointwise deviation {point_err:.3e} mm"),
    );
    rep.time(1, start.elapsed(), Duration::from_secs(5));
}

/// Weighted mean anchored at the first point, as documented for the fuser.
fn ref_mean(points: &[(Vec3, f64)]) -> Vec3 {
    let a = points[0].0;
    let total: f64 = points.iter().map(|p| p.1).sum();
    let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
    if total > 0.0 {
        for (p, c) in points {
            x += (p.x - a.x) * c;
            y += (p.y - a.y) * c;
            z += (p.z - a.z) * c;
        }
        let k = 1.0 / total;
        Vec3::new(a.x + x * k, a.y + y * k, a.z + z * k)
    } else {
        for (p, _) in points {
            x += p.x - a.x;
            y += p.y - a.y;
            z += p.z - a.z;
        }
        let k = 1.0 / points.len() as f64;
        Vec3::new(a.x + x * k, a.y + y * k, a.z + z * k)
    }
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Brute-force reference: enumerate every contributor, remove the single
/// lowest-confidence outlier, average the rest.
fn reference_fuse(frames: &[SkeletonFrame32], policy: &FusionPolicy) -> Vec<Option<(Vec3, f64, u8)>> {
    (0..NUM_SOURCE_JOINTS)
        .map(|j| {
            let mut contrib: Vec<(usize, Vec3, f64)> = Vec::new();
            for (di, d) in DeviceId::ALL.iter().enumerate() {
                for f in frames.iter().filter(|f| f.device == *d) {
                    if let Some(s) = f.slots[j] {
                        if s.confidence >= policy.min_confidence {
                            contrib.push((di, s.position, s.confidence));
                        }
                    }
                }
            }
            if contrib.is_empty() {
                return None;
            }
            if contrib.len() >= 2 {
                let mut worst: Option<usize> = None;
                for i in 0..contrib.len() {
                    let others: Vec<(Vec3, f64)> =
                        contrib.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, c)| (c.1, c.2)).collect();
                    let far = dist(contrib[i].1, ref_mean(&others)) > policy.outlier_threshold;
                    if far && worst.is_none_or(|w| contrib[i].2 < contrib[w].2) {
                        worst = Some(i);
                    }
                }
                if let Some(w) = worst {
                    contrib.remove(w);
                }
            }
            let pts: Vec<(Vec3, f64)> = contrib.iter().map(|c| (c.1, c.2)).collect();
            let conf = contrib.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
            let mask = contrib.iter().fold(0u8, |m, c| m | (1 << c.0));
            Some((ref_mean(&pts), conf, mask))
        })
        .collect()
}

fn gt_error(frame: &[Option<Vec3>], gt: &Skeleton16) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (j, src) in SOURCE_JOINTS.iter().enumerate() {
        if let Some(p) = frame[*src] {
            sum += dist(p, gt.joint(j));
            n += 1;
        }
    }
    (sum, n)
}

fn criterion_2(rep: &mut Report) {
    let policy = FusionPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let confs = [0.05, 0.3, 0.3, 0.6, 0.9, 0.9];
    let mut mismatches = 0;
    for k in 0..100u64 {
        let mut frames: Vec<SkeletonFrame32> =
            DeviceId::ALL.iter().map(|d| SkeletonFrame32::empty(k, *d)).collect();
        frames.rotate_left((k % 3) as usize);
        for j in 0..NUM_SOURCE_JOINTS {
            let base = random_vec(&mut rng, 2000.0);
            for f in frames.iter_mut() {
                if rng.random::<f64>() < 0.8 {
                    let mut p = base + random_vec(&mut rng, 20.0);
                    if rng.random::<f64>() < 0.15 {
                        p += random_vec(&mut rng, 600.0);
                    }
                    f.slots[j] = Some(JointSlot { position: p, confidence: confs[rng.random_range(0..confs.len())] });
                }
            }
        }
        let got = fuse(&frames, &policy).unwrap();
        let want = reference_fuse(&frames, &policy);
        for j in 0..NUM_SOURCE_JOINTS {
            let g = got.joints[j].map(|p| (p, got.confidence[j], got.sources[j]));
            if g != want[j] {
                mismatches += 1;
            }
        }
    }
    rep.check(2, "fuser equals brute-force reference", mismatches == 0, format!("{mismatches} joint mismatches over 100 frames x 32 joints"));

    let rig = VirtualRig::standard();
    let profile = gen_identity(7);
    let gt = simulate_walk(&profile, View::T45, 100);
    let chains: Vec<RigidTransform> =
        DeviceId::ALL.iter().map(|d| rig.calibration.chain_to_master(*d, ChainMode::Strict).unwrap()).collect();
    let obs = rig.observe(&gt, 0.0, &OcclusionModel::none(), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut worst = 0.0f64;
    for (k, g) in gt.iter().enumerate() {
        let aligned: Vec<SkeletonFrame32> = (0..3).map(|d| align_frame(&obs[d][k], &chains[d])).collect();
        let s = select_joints(&fuse(&aligned, &policy).unwrap()).unwrap();
        for j in 0..NUM_JOINTS {
            worst = worst.max(dist(s.joint(j), g.joint(j)));
        }
    }
    rep.check(2, "zero-noise rig recovers ground truth", worst < 1e-9, format!("max joint error {worst:.3e} mm over 100 frames"));

    let occlusion = OcclusionModel { occluder: 0.0, ..OcclusionModel::default() };
    let gt = simulate_walk(&profile, View::Deg90, 100);
    let obs = rig.observe(&gt, profile.noise_mm, &occlusion, 2.0, &mut ChaCha8Rng::seed_from_u64(4));
    let mut fused = (0.0, 0usize);
    let mut device = [(0.0, 0usize); 3];
    for (k, g) in gt.iter().enumerate() {
        let aligned: Vec<SkeletonFrame32> = (0..3).map(|d| align_frame(&obs[d][k], &chains[d])).collect();
        for d in 0..3 {
            let slots: Vec<Option<Vec3>> = aligned[d].slots.iter().map(|s| s.map(|s| s.position)).collect();
            let (s, n) = gt_error(&slots, g);
            device[d].0 += s;
            device[d].1 += n;
        }
        let f = fuse(&aligned, &policy).unwrap();
        let (s, n) = gt_error(&f.joints, g);
        fused.0 += s;
        fused.1 += n;
    }
    let fused_mean = fused.0 / fused.1 as f64;
    let dev_means: Vec<f64> = device.iter().map(|(s, n)| s / *n as f64).collect();
    rep.check(
        2,
        "fused error <= every device under yaw occlusion",
        dev_means.iter().all(|d| fused_mean <= *d),
        format!("fused {fused_mean:.2} mm; devices {:.2} / {:.2} / {:.2} mm", dev_means[0], dev_means[1], dev_means[2]),
    );
}

fn criterion_3(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut h_err, mut scale_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mut len = [0.0; NUM_JOINTS];
        for l in len.iter_mut().skip(1) {
            *l = rng.random_range(50.0..500.0);
        }
        let mut joints = [Vec3::ZERO; NUM_JOINTS];
        joints[PELVIS] = random_vec(&mut rng, 3000.0);
        for (c, p) in PARENT.iter().enumerate() {
            if let Some(p) = p {
                let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                joints[c] = joints[*p] + Vec3::from_array(dir) * len[c];
            }
        }
        let s = Skeleton16::new(joints).unwrap();
        let analytic = len[HEAD] + len[NECK] + len[NAVEL] + (len[L_KNEE] + len[L_ANKLE] + len[R_KNEE] + len[R_ANKLE]) / 2.0;
        h_err = h_err.max((compute_height(&s) - analytic).abs());

        let k = rng.random_range(0.5..2.0);
        let scaled = s.map(|p| p * k);
        let (sb, shr) = compute_sb_shr(&s).unwrap();
        let (sb2, shr2) = compute_sb_shr(&scaled).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        scale_err = scale_err
            .max(rel(compute_height(&scaled), k * compute_height(&s)))
            .max(rel(sb2, k * sb))
            .max(rel(shr2, shr));
    }
    rep.check(3, "height equals analytic segment sum", h_err < 1e-9, format!("max error {h_err:.3e} mm over 10^3 skeletons"));
    rep.check(3, "H, SB linear and SHR invariant under scaling", scale_err < 1e-9, format!("max relative deviation {scale_err:.3e}"));
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn criterion_4(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let limit = 1e-4;
    // Entries whose perturbation crosses a ReLU or hard-mining switch are not
    // differentiable there; at most 5% of entries may be set aside.
    let mut report = |name: &str, r: skelgait::net::gradcheck::GradCheckReport| {
        let total = r.checked + r.straddled;
        rep.check(
            4,
            &format!("gradient check: {name}"),
            r.max_rel_error < limit && r.straddled * 20 <= total,
            format!(
                "max relative error {:.3e} over {} entries, {} straddling a kink (worst {:?})",
                r.max_rel_error, r.checked, r.straddled, r.worst
            ),
        );
    };

    let adj = std::sync::Arc::new(AdjacencyData::<f64>::from_normalized(&NormalizedAdjacency::skeleton_default()));
    let mut s = ParamStore::new();
    let x = s.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[2, 3, 4, 16]));
    let w = s.add("w", ParamKind::Weight, rand_tensor(&mut rng, &[5, 9]));
    let b = s.add("b", ParamKind::Weight, rand_tensor(&mut rng, &[5]));
    let r = check_params(&mut s, DEFAULT_EPS, None, |t, s| {
        let (x, w, b) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.spatial_conv(x, w, b, &adj)?;
        Ok(t.sum_squares(y))
    })
    .unwrap();
    report("spatial graph conv", r);

    let mut s = ParamStore::new();
    let x = s.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[2, 3, 7, 4]));
    let w = s.add("w", ParamKind::Weight, rand_tensor(&mut rng, &[4, 3, 5]));
    let b = s.add("b", ParamKind::Weight, rand_tensor(&mut rng, &[4]));
    let r = check_params(&mut s, DEFAULT_EPS, None, |t, s| {
        let (x, w, b) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.temporal_conv(x, w, b, 2)?;
        Ok(t.sum_squares(y))
    })
    .unwrap();
    report("temporal conv (stride 2)", r);

    let mut s = ParamStore::new();
    let head = JrpmHead::new(&mut s, PyramidSpec::standard(), 4, 3, 2, &mut rng);
    let x = s.add("x", ParamKind::Weight, rand_tensor(&mut rng, &[2, 4, 3, 16]));
    for k in &head.kernels {
        let v = rand_tensor(&mut rng, s.value(*k).shape());
        s.get_mut(*k).value = v;
    }
    let r = check_params(&mut s, DEFAULT_EPS, None, |t, s| {
        let x = t.param(s, x);
        let out = head.forward(t, s, x)?;
        Ok(t.sum_squares(out.embedding))
    })
    .unwrap();
    report("JRPM pool + project", r);

    let mut s = ParamStore::new();
    let e = s.add("emb", ParamKind::Weight, rand_tensor(&mut rng, &[8, 5]));
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let r = check_params(&mut s, DEFAULT_EPS, None, |t, s| {
        let e = t.param(s, e);
        t.batch_hard_triplet(e, &labels, 1.0)
    })
    .unwrap();
    report("batch-hard triplet", r);

    let mut s = ParamStore::new();
    let e = s.add("emb", ParamKind::Weight, rand_tensor(&mut rng, &[6, 5]));
    let c = s.add("centers", ParamKind::LossHead, rand_tensor(&mut rng, &[3, 5]));
    let labels = [0, 1, 2, 0, 1, 2];
    let r = check_params(&mut s, DEFAULT_EPS, None, |t, s| {
        let (e, c) = (t.param(s, e), t.param(s, c));
        t.arcface(e, c, &labels, 30.0, 0.5)
    })
    .unwrap();
    report("arcface", r);

    let cfg = ModelConfig {
        channel_plan: vec![BlockSpec::new(3, 4, 1), BlockSpec::new(4, 4, 1), BlockSpec::new(4, 6, 2)],
        frames: 6,
        embedding_dim: 3,
        temporal_width: 3,
        ..Default::default()
    };
    let mut base = GaitModel::<f64>::new(cfg, 5).unwrap();
    base.add_arcface_head(2, 5);
    // Zero biases at initialization put exact zeros into ReLUs, so the check
    // runs at a jittered parameter point instead.
    for p in base.store.iter_mut() {
        if p.kind != ParamKind::Buffer {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        }
    }
    let fj = rand_tensor(&mut rng, &[4, 3, 6, 16]);
    let fa = rand_tensor(&mut rng, &[4, 3, 6, 16]);
    let labels = [0, 0, 1, 1];
    let centers = base.centers.unwrap();
    let mut store = base.store.clone();
    let r = check_params(&mut store, DEFAULT_EPS, None, |t, s| {
        let mut m = base.clone();
        m.store = s.clone();
        let (j, a) = (t.constant(fj.clone()), t.constant(fa.clone()));
        let out = m.forward(t, j, a, ForwardMode::Train)?;
        let tri = t.batch_hard_triplet(out.embedding(), &labels, 0.2)?;
        let w = t.param(s, centers);
        let arc = t.arcface(out.embedding(), w, &labels, 30.0, 0.5)?;
        let (tri, arc) = (t.scale(tri, 0.9), t.scale(arc, 0.1));
        t.add(tri, arc)
    })
    .unwrap();
    report("end-to-end tiny network", r);
    rep.time(4, start.elapsed(), Duration::from_secs(60));
}

fn hand_parameter_count(cfg: &ModelConfig) -> usize {
    let mut total = 0;
    for (i, b) in cfg.channel_plan.iter().enumerate() {
        total += b.cout * 3 * b.cin + b.cout;
        total += b.cout * b.cout * cfg.temporal_width + b.cout;
        total += 4 * b.cout;
        if i > 0 && (b.cin != b.cout || b.stride != 1) {
            total += b.cout * b.cin + b.cout + 2 * b.cout;
        }
    }
    let (c, t) = (2 * cfg.output_channels(), cfg.output_frames());
    let groups = [16, 9, 7, 6, 6];
    total + groups.iter().map(|j| j * t + cfg.embedding_dim * c + cfg.embedding_dim).sum::<usize>()
}

fn criterion_5(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig::default();
    let mut model = GaitModel::<f32>::new(cfg.clone(), 5).unwrap();
    let input: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, cfg.frames, 16]).cast();
    let mut identical = true;
    for mode in [ForwardMode::Train, ForwardMode::Eval] {
        let mut t = Tape::new();
        let (j, a) = (t.constant(input.clone()), t.constant(input.clone()));
        let out = model.forward(&mut t, j, a, mode).unwrap();
        identical &= t.value(out.f_jst).data() == t.value(out.f_ast).data();
    }
    for p in model.store.iter_mut() {
        if p.kind == ParamKind::Weight {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.random_range(-1.0f32..1.0));
        }
    }
    let mut t = Tape::new();
    let (j, a) = (t.constant(input.clone()), t.constant(input.clone()));
    let out = model.forward(&mut t, j, a, ForwardMode::Train).unwrap();
    identical &= t.value(out.f_jst).data() == t.value(out.f_ast).data();
    rep.check(5, "identical inputs give bitwise-identical streams", identical, "train and eval modes, before and after a weight update".into());

    let other: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, cfg.frames, 16]).cast();
    let mut t = Tape::new();
    let (j, a) = (t.constant(input), t.constant(other));
    model.forward(&mut t, j, a, ForwardMode::Eval).unwrap();
    let leaves: std::collections::HashSet<_> = model.store.iter().filter_map(|(id, _)| t.param_var(id)).collect();
    let trainable = model.store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer).count();
    let counted = model.num_parameters();
    let hand = hand_parameter_count(&cfg);
    rep.check(
        5,
        "one parameter set shared by both streams",
        counted == hand && leaves.len() == trainable,
        format!("{counted} trainable (single-stream hand count {hand}); {} tape leaves for {trainable} tensors", leaves.len()),
    );
    rep.check(
        5,
        "default parameter count in [0.42M, 0.62M]",
        (420_000..=620_000).contains(&counted),
        format!("{counted}"),
    );
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, ids: usize) -> EmbeddingBatch {
    EmbeddingBatch {
        dim,
        values: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ids: (0..n).map(|_| rng.random_range(0..ids)).collect(),
        views: vec![View::Deg0; n],
        conditions: vec![Condition::Lcl; n],
    }
}

/// Exhaustive triplet enumeration: every (anchor, positive, negative).
fn exhaustive_triplet(b: &EmbeddingBatch, margin: f64) -> Option<f64> {
    let n = b.len();
    let d = |i: usize, j: usize| {
        let mut s = 0.0;
        for k in 0..b.dim {
            let x = b.row(i)[k] - b.row(j)[k];
            s += x * x;
        }
        s.sqrt()
    };
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut best: Option<f64> = None;
        for p in 0..n {
            for q in 0..n {
                if p == a || b.ids[p] != b.ids[a] || b.ids[q] == b.ids[a] {
                    continue;
                }
                let v = (margin + d(a, p)) - d(a, q);
                best = Some(best.map_or(v, |x: f64| x.max(v)));
            }
        }
        if let Some(v) = best {
            anchors += 1;
            if v > 0.0 {
                total += v;
            }
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

fn criterion_6(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..300 {
        let n = rng.random_range(2..=16);
        let dim = rng.random_range(1..=8);
        let b = random_batch(&mut rng, n, dim, 4);
        let got = loss::batch_hard_triplet(&b, &TripletConfig::default()).ok();
        let want = exhaustive_triplet(&b, 0.2);
        checked += 1;
        if got != want {
            mismatches += 1;
        }
    }
    rep.check(6, "batch-hard triplet equals exhaustive enumeration", mismatches == 0, format!("{mismatches} mismatches over {checked} random batches, N <= 16"));

    let mut worst = 0.0f64;
    let cfg = ArcfaceConfig::default();
    for _ in 0..100 {
        let b = random_batch(&mut rng, 8, 6, 3);
        let centers: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut scaled = b.clone();
        for i in 0..scaled.len() {
            let k = rng.random_range(0.1..10.0);
            scaled.values[i * 6..(i + 1) * 6].iter_mut().for_each(|v| *v *= k);
        }
        let a = loss::arcface(&b, &centers, &cfg).unwrap();
        let s = loss::arcface(&scaled, &centers, &cfg).unwrap();
        worst = worst.max((a - s).abs());
    }
    rep.check(6, "arcface invariant to embedding rescaling", worst < 1e-6, format!("max change {worst:.3e}"));

    let mut worst = 0.0f64;
    let cfg = FusionLossConfig::default();
    for _ in 0..100 {
        let mut b = random_batch(&mut rng, 8, 6, 3);
        b.ids = vec![0, 0, 1, 1, 2, 2, 0, 1];
        let centers: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let total = loss::fusion_loss(&b, &centers, &cfg).unwrap();
        let tri = exhaustive_triplet(&b, 0.2).unwrap();
        let arc = loss::arcface(&b, &centers, &cfg.arcface).unwrap();
        worst = worst.max((total - (0.9 * tri + 0.1 * arc)).abs());
    }
    rep.check(6, "fusion loss = 0.9 tri + 0.1 arc", worst < 1e-12, format!("max deviation {worst:.3e}"));
}

fn criterion_7(rep: &mut Report) {
    let spec = PyramidSpec::standard();
    let all: BTreeSet<usize> = (0..NUM_JOINTS).collect();
    let limbs: BTreeSet<usize> = LIMB_JOINTS.iter().copied().collect();
    let mut ok = true;
    for (scale, target) in [(1, &all), (2, &all), (3, &limbs)] {
        let groups: Vec<&Vec<usize>> = spec.groups.iter().filter(|g| g.scale == scale).map(|g| &g.joints).collect();
        let total: usize = groups.iter().map(|g| g.len()).sum();
        let union: BTreeSet<usize> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        ok &= total == union.len() && &union == target;
    }
    rep.check(7, "scales 1-2 partition 16 joints, scale 3 the 12 limb joints", ok, format!("{} groups", spec.groups.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let (c, t_len) = (6, 15);
    let head = JrpmHead::new(&mut store, spec.clone(), c, t_len, 4, &mut rng);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[3, c, t_len, 16]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let out = head.forward(&mut tape, &store, xv).unwrap();
    let mut worst = 0.0f64;
    for (g, pooled) in spec.groups.iter().zip(&out.pooled) {
        let got = tape.value(*pooled).to_f64();
        for n in 0..3 {
            for ch in 0..c {
                let mut s = 0.0;
                for t in 0..t_len {
                    for j in &g.joints {
                        s += x.data()[((n * c + ch) * t_len + t) * 16 + j];
                    }
                }
                let mean = s / (t_len * g.joints.len()) as f64;
                worst = worst.max((got[n * c + ch] - mean).abs());
            }
        }
    }
    rep.check(7, "uniform-kernel pooling equals mean pooling", worst < 1e-6, format!("max deviation {worst:.3e}"));
}

fn brute_force_rank1(gallery: &EmbeddingBatch, probes: &EmbeddingBatch) -> Vec<bool> {
    (0..probes.len())
        .map(|i| {
            let mut cands: Vec<(f64, usize)> = (0..gallery.len())
                .filter(|g| gallery.views[*g] != probes.views[i])
                .map(|g| (loss::euclidean(gallery.row(g), probes.row(i)), gallery.ids[g]))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.first().map(|c| c.1) == Some(probes.ids[i])
        })
        .collect()
}

fn criterion_8(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let views = [View::Deg0, View::Deg90];
    let make = |rng: &mut ChaCha8Rng, cond: Condition, noise: f64| {
        let mut b = EmbeddingBatch { dim: 4, values: vec![], ids: vec![], views: vec![], conditions: vec![] };
        for id in 0..3 {
            for v in views {
                b.values.extend((0..4).map(|k| if k == id { 5.0 } else { 0.0 } + rng.random_range(-noise..noise)));
                b.ids.push(id);
                b.views.push(v);
                b.conditions.push(cond);
            }
        }
        b
    };
    let g = make(&mut rng, Condition::Lcl, 0.1);
    let r = evaluate(&g, &g, Metric::Euclidean);
    rep.check(8, "gallery = probe yields 100% rank-1", r.overall == 1.0, format!("overall {:.3}", r.overall));

    let mut adv_g = EmbeddingBatch { dim: 2, values: vec![], ids: vec![], views: vec![], conditions: vec![] };
    let mut adv_p = adv_g.clone();
    // Each probe coincides with its own same-view gallery entry and sits
    // next to a wrongly labelled entry at the other view.
    for id in 0..3usize {
        let x = 10.0 * id as f64;
        for (view, label, y) in [(View::Deg0, id, 0.0), (View::Deg90, (id + 1) % 3, 1.0)] {
            adv_g.values.extend([x, y]);
            adv_g.ids.push(label);
            adv_g.views.push(view);
            adv_g.conditions.push(Condition::Lcl);
        }
        adv_p.values.extend([x, 0.0]);
        adv_p.ids.push(id);
        adv_p.views.push(View::Deg0);
        adv_p.conditions.push(Condition::Bob);
    }
    let r = evaluate(&adv_g, &adv_p, Metric::Euclidean);
    rep.check(8, "identical-view exclusion (adversarial case)", r.overall == 0.0, format!("overall {:.3}", r.overall));

    let mut mismatches = 0;
    for _ in 0..200 {
        let g = make(&mut rng, Condition::Lcl, 4.0);
        let p = make(&mut rng, Condition::Bob, 4.0);
        let r = evaluate(&g, &p, Metric::Euclidean);
        let oracle = brute_force_rank1(&g, &p);
        for v in views {
            let hits = (0..p.len()).filter(|i| p.views[*i] == v && oracle[*i]).count();
            if r.cell(Condition::Bob, v).map(|c| c.correct) != Some(hits) {
                mismatches += 1;
            }
        }
    }
    rep.check(8, "evaluation matches brute-force nearest neighbor", mismatches == 0, format!("{mismatches} cell mismatches over 200 random 3-identity sets"));
}

fn compact_model(frames: usize, embedding_dim: usize) -> ModelConfig {
    ModelConfig {
        channel_plan: vec![BlockSpec::new(3, 8, 1), BlockSpec::new(8, 16, 2), BlockSpec::new(16, 16, 2)],
        frames,
        embedding_dim,
        ..Default::default()
    }
}

fn load_all(dir: &std::path::Path, frames: usize) -> Vec<Sample> {
    let manifest = skelgait::protocol::DatasetManifest::load(&dir.join("manifest.json")).unwrap();
    let calib = CalibrationSet::from_json(&std::fs::read_to_string(dir.join("calibration.json")).unwrap()).unwrap();
    let all: Vec<usize> = (0..manifest.sequences.len()).collect();
    load_samples(&manifest, dir, &all, &calib, &PipelineOptions::default(), frames).unwrap()
}

fn criterion_9(rep: &mut Report) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { n_ids: 8, views: View::STRAIGHT.to_vec(), reps: 3, seed: 9, ..Default::default() };
    build_synthetic_manifest(dir.path(), &synth).unwrap();
    let frames = 24;
    let samples = load_all(dir.path(), frames);
    let train_set: Vec<Sample> = samples.iter().filter(|s| s.rep < 2).cloned().collect();
    let held_out: Vec<Sample> = samples.iter().filter(|s| s.rep == 2).cloned().collect();
    let cfg = TrainConfig { iterations: 2000, batch: BatchPlan { p: 8, k: 2 }, seed: 9, ..Default::default() };
    let prov = Provenance::new("acceptance-9", 9);

    let run = || {
        let mut model = GaitModel::<f32>::new(compact_model(frames, 32), cfg.seed).unwrap();
        let trace = train(&mut model, &train_set, &cfg, |_, _| {}).unwrap();
        (model, trace)
    };
    let (model, trace) = run();
    let losses: Vec<f64> = trace.iter().map(|t| t.1).collect();
    let smoothed = smooth(&losses, 100);
    let (at100, at2000) = (smoothed[99], smoothed[1999]);
    rep.check(9, "smoothed loss decreases 100 -> 2000", at2000 < at100, format!("{at100:.4} -> {at2000:.4}"));

    let gallery = extract(&model, &train_set, 1).unwrap();
    let probes = extract(&model, &held_out, 1).unwrap();
    let r = evaluate(&gallery, &probes, Metric::Euclidean);
    let (correct, total) = r.cells.iter().fold((0, 0), |a, c| (a.0 + c.correct, a.1 + c.total));
    let acc = correct as f64 / total as f64;
    rep.check(9, "held-out rank-1 >= 95%", acc >= 0.95, format!("{correct}/{total} = {:.3}", acc));

    let first = checkpoint::save(&model, &prov);
    let (model2, _) = run();
    let second = checkpoint::save(&model2, &prov);
    rep.check(9, "same seed gives byte-identical checkpoints", first == second, format!("{} bytes", first.len()));
    rep.time(9, start.elapsed(), Duration::from_secs(600));
}

fn criterion_10(rep: &mut Report) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sweep = [Condition::Lcl, Condition::Sob, Condition::Bob, Condition::Lob, Condition::Mcl, Condition::Hcl];
    let synth = SynthConfig { n_ids: 12, conditions: sweep.to_vec(), views: View::STRAIGHT.to_vec(), reps: 5, seed: 3, ..Default::default() };
    build_synthetic_manifest(dir.path(), &synth).unwrap();
    let frames = 24;
    let samples = load_all(dir.path(), frames);
    let train_set: Vec<Sample> = samples.iter().filter(|s| s.subject < 6).cloned().collect();
    let gallery_set: Vec<Sample> = samples.iter().filter(|s| s.subject >= 6 && s.condition == Condition::Lcl && s.rep == 0).cloned().collect();
    let probe_set: Vec<Sample> = samples.iter().filter(|s| s.subject >= 6 && s.rep >= 1).cloned().collect();
    let cfg = TrainConfig { iterations: 600, batch: BatchPlan { p: 6, k: 4 }, seed: 3, ..Default::default() };
    let mut model = GaitModel::<f32>::new(compact_model(frames, 16), cfg.seed).unwrap();
    train(&mut model, &train_set, &cfg, |_, _| {}).unwrap();
    let gallery = extract(&model, &gallery_set, 1).unwrap();
    let probes = extract(&model, &probe_set, 1).unwrap();
    let r = evaluate(&gallery, &probes, Metric::Euclidean);
    let (correct, total) = r.cells.iter().fold((0, 0), |a, c| (a.0 + c.correct, a.1 + c.total));
    let acc = correct as f64 / total as f64;
    rep.check(10, "unseen-identity rank-1 >= 3x chance (0.5)", acc >= 3.0 / 6.0, format!("{correct}/{total} = {acc:.3}"));

    let per: Vec<(Condition, usize, usize)> = sweep
        .iter()
        .map(|c| {
            let cells = r.cells.iter().filter(|x| x.condition == *c);
            let (k, n) = cells.fold((0, 0), |a, x| (a.0 + x.correct, a.1 + x.total));
            (*c, k, n)
        })
        .collect();
    let monotone = per.windows(2).all(|w| w[0].2 == w[1].2 && w[1].1 <= w[0].1);
    let detail: Vec<String> = per.iter().map(|(c, k, n)| format!("{c} {k}/{n}")).collect();
    rep.check(10, "accuracy non-increasing with occlusion severity", monotone, detail.join(", "));
    rep.time(10, start.elapsed(), Duration::from_secs(600));
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [fn(&mut Report); 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let mut rep = Report { failures: 0 };
    for (i, run) in criteria.iter().enumerate() {
        if only.as_ref().is_none_or(|o| o.contains(&(i + 1))) {
            run(&mut rep);
        }
    }
    println!("acceptance: {} failing check(s)", rep.failures);
    if rep.failures > 0 {
        std::process::exit(1);
    }
}
