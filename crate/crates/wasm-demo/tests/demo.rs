use skelgait::skeleton::{PARENT, NUM_JOINTS};
use skelgait::synth::{gen_identity, simulate_walk};
use skelgait::protocol::View;
use skelgait_wasm_demo::{dual_skeleton, graph, graph_partitions_js, simulate, view_labels, DemoError};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn walk_rejects_bad_input() {
    assert!(matches!(simulate(1, "45", "LCL", 30), Err(DemoError::Label(_))));
    assert!(matches!(simulate(1, "90", "XYZ", 30), Err(DemoError::Label(_))));
    assert_eq!(simulate(1, "90", "LCL", 1).unwrap_err(), DemoError::Frames(1));
    assert_eq!(simulate(1, "90", "LCL", 301).unwrap_err(), DemoError::Frames(301));
}

#[test]
fn walk_truth_matches_generator() {
    let d = simulate(11, "T135", "SOB", 40).unwrap();
    let gt = simulate_walk(&gen_identity(11), View::T135, 40);
    assert_eq!(d.frames.len(), 40);
    for (f, g) in d.frames.iter().zip(&gt) {
        for j in 0..NUM_JOINTS {
            assert_eq!(f.truth[j], g.0[j].to_array());
        }
    }
}

#[test]
fn walk_is_deterministic() {
    let a = serde_json::to_string(&simulate(3, "90", "HCL", 25).unwrap()).unwrap();
    let b = serde_json::to_string(&simulate(3, "90", "HCL", 25).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn walk_errors_agree_with_frames() {
    let d = simulate(5, "0", "LOB", 60).unwrap();
    for f in &d.frames {
        let errs: Vec<f64> = f.fused.iter().zip(&f.truth).filter_map(|(p, t)| p.map(|p| dist(p, *t))).collect();
        match f.fused_error {
            Some(e) => assert!((e - errs.iter().sum::<f64>() / errs.len() as f64).abs() < 1e-9),
            None => assert!(errs.is_empty()),
        }
    }
    assert!(d.fused_coverage >= d.device_coverage.iter().cloned().fold(0.0, f64::max));
    // fusion rides on the best device instead of averaging in the worst
    let worst = d.mean_device_error.iter().flatten().cloned().fold(0.0, f64::max);
    assert!(d.mean_fused_error.unwrap() < worst);
}

#[test]
fn dual_skeleton_pseudo_nodes_are_bones() {
    let d = dual_skeleton(9, 30.0, 0.4).unwrap();
    for j in 1..NUM_JOINTS {
        let p = PARENT[j].unwrap();
        for a in 0..3 {
            assert!((d.pseudo[j][a] - (d.real[p][a] - d.real[j][a])).abs() < 1e-9);
        }
        assert!((d.bone_lengths[j] - dist(d.real[j], d.real[p])).abs() < 1e-9);
    }
    assert_eq!(d.pseudo[0], [d.height, d.shoulder_breadth, d.shoulder_hip_ratio]);
    // walking heading does not change body measurements
    let e = dual_skeleton(9, -120.0, 0.4).unwrap();
    assert!((d.height - e.height).abs() < 1e-6);
    assert!((d.shoulder_breadth - e.shoulder_breadth).abs() < 1e-6);
}

#[test]
fn graph_partitions_are_consistent() {
    let g = graph();
    let v = g.joint_names.len();
    assert_eq!(g.partitions.len(), 3);
    assert_eq!(g.edges.len(), v - 1);
    for i in 0..v {
        for j in 0..v {
            assert_eq!(g.partitions[0][i * v + j], g.partitions[0][j * v + i]);
            assert_eq!(g.partitions[1][i * v + j] > 0.0, g.partitions[2][j * v + i] > 0.0);
        }
    }
    let json: serde_json::Value = serde_json::from_str(&graph_partitions_js()).unwrap();
    assert_eq!(json["partitions"].as_array().unwrap().len(), 3);
    let views: Vec<String> = serde_json::from_str(&view_labels()).unwrap();
    assert_eq!(views.len(), 8);
}
