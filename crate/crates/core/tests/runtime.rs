use heinfer_core::approx::ReluDegree;
use heinfer_core::backend::{decrypt, encrypt, keygen, Evaluator};
use heinfer_core::calibration::{calibrate, cleartext_forward, CalibratedModel, DomainMethod, Interval};
use heinfer_core::dataset::CalibrationSet;
use heinfer_core::fixtures::{build_fixture, FixtureName};
use heinfer_core::graph::{infer_shapes, AttrValue, ModelGraph, Node, OpKind, TensorSpec, Window2d, EXPORT_OPSET};
use heinfer_core::harness::{agreement_experiment, folding_equivalence, lowering_soundness, SOUNDNESS_CASES};
use heinfer_core::ops;
use heinfer_core::params::{
    derive_ckks_params, derive_tfhe_params, multiplicative_depth, BackendKind, DEFAULT_MSG_BITS,
};
use heinfer_core::protocol::KeyparamsOptions;
use heinfer_core::runtime::{im2col_matrix, plan, run_inference, Lowering, PlanError, PlanOptions, ReluPolicy};
use heinfer_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn calibrated(name: FixtureName) -> CalibratedModel {
    let fx = build_fixture(name, 1);
    calibrate(&fx.graph, &fx.calibration).unwrap()
}

fn graph(input_shape: Vec<usize>) -> ModelGraph {
    let mut g = ModelGraph {
        name: "t".into(),
        opset: EXPORT_OPSET,
        nodes: Vec::new(),
        edges: Default::default(),
        initializers: Default::default(),
        inputs: vec!["x".into()],
        outputs: Vec::new(),
    };
    g.edges.insert("x".into(), TensorSpec::new(input_shape));
    g
}

fn constant(g: &mut ModelGraph, name: &str, t: Tensor) {
    g.edges.insert(name.into(), TensorSpec::new(t.shape().to_vec()));
    g.initializers.insert(name.into(), t);
}

#[test]
fn every_lowering_matches_the_reference_forward_pass() {
    let rows = lowering_soundness(100, 1);
    assert_eq!(rows.len(), SOUNDNESS_CASES.len());
    for r in rows {
        assert_eq!(r.instances, 100);
        assert!(r.max_abs_err <= 1e-9, "{}: {}", r.case, r.max_abs_err);
    }
}

#[test]
fn two_by_two_identity_kernel_on_three_by_three() {
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let win = Window2d { kernel: [2, 2], strides: [1, 1], pads: [0, 0, 0, 0] };
    let p = im2col_matrix(&[1, 1, 3, 3], &w, &win, 1, None).unwrap();
    assert_eq!((p.matrix.rows(), p.matrix.cols()), (4, 9));
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
    // Direct convolution: x[i][j] + x[i+1][j+1].
    let direct = [1.0 + 5.0, 2.0 + 6.0, 4.0 + 8.0, 5.0 + 9.0];
    assert_eq!(p.apply(&x).data(), direct);
    assert_eq!(p.apply(&x), ops::conv2d(&x, &w, None, &win, 1));
}

#[test]
fn random_padded_conv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(vec![1, 1, 5, 5], (0..25).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
    let win = Window2d { kernel: [3, 3], strides: [1, 1], pads: [1, 1, 1, 1] };
    let y = im2col_matrix(&[1, 1, 5, 5], &w, &win, 1, None).unwrap().apply(&x);
    let at = |i: isize, j: isize| {
        if (0..5).contains(&i) && (0..5).contains(&j) {
            x.data()[(i * 5 + j) as usize]
        } else {
            0.0
        }
    };
    for i in 0..5 {
        for j in 0..5 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += w.data()[(a * 3 + b) as usize] * at(i + a - 1, j + b - 1);
                }
            }
            assert!((y.data()[(i * 5 + j) as usize] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn depthwise_conv_is_block_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let win = Window2d { kernel: [2, 2], strides: [1, 1], pads: [0; 4] };
    let m = im2col_matrix(&[1, 3, 2, 2], &w, &win, 3, None).unwrap().matrix;
    assert_eq!((m.rows(), m.cols()), (3, 12));
    for r in 0..3 {
        for (c, v) in m.row(r) {
            assert_eq!(c / 4, r, "entry outside the channel block");
            assert_eq!(v, w.data()[r * 4 + c % 4]);
        }
    }
}

#[test]
fn identity_gemm_roundtrip_on_both_backends() {
    let mut g = graph(vec![1, 6]);
    let eye: Vec<f64> = (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
    constant(&mut g, "w", Tensor::new(vec![6, 6], eye));
    g.nodes.push(Node::new("fc", OpKind::Gemm, &["x", "w"], &["y"]));
    g.outputs = vec!["y".into()];
    let g = infer_shapes(&g).unwrap();
    let x = Tensor::new(vec![1, 6], vec![0.1, 0.9, 0.5, 0.3, 0.7, 0.2]);
    let cm = calibrate(&g, &CalibrationSet::new("x", vec![x.clone()])).unwrap();
    for kp in [
        derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap(),
        derive_tfhe_params(&cm, 128, 6, DomainMethod::MinMax).unwrap(),
    ] {
        let (sk, ek) = keygen(&kp, [3; 32]);
        let p = plan(&cm, &kp, &PlanOptions::default()).unwrap();
        let ev = Evaluator::new(&ek);
        let (ct, _) = run_inference(&p, &ev, &encrypt(&sk, &x).unwrap()).unwrap();
        let y = decrypt(&sk, &ct).unwrap();
        // TFHE: one 6-bit code over [0.1, 0.9].
        let tol = if kp.backend == BackendKind::Tfhe { 0.8 / 63.0 / 2.0 + 1e-12 } else { 1e-6 };
        assert!(y.max_abs_diff(&x) <= tol, "{}: {:?}", kp.backend, y.data());
    }
}

#[test]
fn levels_consumed_equal_multiplicative_depth_without_composition() {
    let expected =
        [(FixtureName::CryptoNets, 7), (FixtureName::LeNet5, 15), (FixtureName::MobileFaceNetsClassifier, 2)];
    for (name, d_m) in expected {
        let cm = calibrated(name);
        let report = multiplicative_depth(&cm.graph, ReluDegree::Three).unwrap();
        assert_eq!(report.d_m, d_m, "{name}");
        let kp = derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap();
        let (sk, ek) = keygen(&kp, [4; 32]);
        let opts = PlanOptions { compose_linear: false, ..PlanOptions::default() };
        let p = plan(&cm, &kp, &opts).unwrap();
        let ev = Evaluator::new(&ek);
        let x = build_fixture(name, 1).sample_inputs(1, 3).remove(0);
        let (ct, stats) = run_inference(&p, &ev, &encrypt(&sk, &x).unwrap()).unwrap();
        assert_eq!(stats.levels_consumed, d_m, "{name}");
        assert_eq!(ct.shape(), cm.graph.spec(&cm.graph.outputs[0]).unwrap().shape.as_slice());
    }
}

#[test]
fn composition_saves_levels_and_keeps_results() {
    let cm = calibrated(FixtureName::LeNet5);
    let kp = derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap();
    let (sk, ek) = keygen(&kp, [5; 32]);
    let x = build_fixture(FixtureName::LeNet5, 1).sample_inputs(1, 4).remove(0);
    let ct = encrypt(&sk, &x).unwrap();
    let run = |compose_linear| {
        let p = plan(&cm, &kp, &PlanOptions { compose_linear, ..PlanOptions::default() }).unwrap();
        let ev = Evaluator::new(&ek);
        let (out, stats) = run_inference(&p, &ev, &ct).unwrap();
        (decrypt(&sk, &out).unwrap(), stats.levels_consumed, p)
    };
    let (composed, lv_c, p) = run(true);
    let (plain, lv_p, _) = run(false);
    assert_eq!(lv_p, 15);
    // Both pools merge into the following convolution.
    assert_eq!(lv_c, 13);
    assert!(p.linear_maps().any(|m| m.sources == ["pool1", "conv2"]));
    assert!(composed.max_abs_diff(&plain) < 1e-4 * composed.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn relu_reshape_relu_folds_into_one_flush() {
    let mut g = graph(vec![1, 2, 2, 2]);
    g.nodes.push(Node::new("r1", OpKind::Relu, &["x"], &["a"]));
    g.nodes.push(Node::new("flat", OpKind::Flatten, &["a"], &["b"]).with_attr("axis", AttrValue::Int(1)));
    g.nodes.push(Node::new("r2", OpKind::Relu, &["b"], &["y"]));
    g.outputs = vec!["y".into()];
    let g = infer_shapes(&g).unwrap();
    let x = Tensor::new(vec![1, 2, 2, 2], vec![-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 1.0, -0.25]);
    let cm = calibrate(&g, &CalibrationSet::new("x", vec![x.clone()])).unwrap();
    let kp = derive_tfhe_params(&cm, 128, DEFAULT_MSG_BITS, DomainMethod::MinMax).unwrap();
    let (sk, ek) = keygen(&kp, [6; 32]);
    let p = plan(&cm, &kp, &PlanOptions::default()).unwrap();
    let ev = Evaluator::new(&ek);
    let (ct, stats) = run_inference(&p, &ev, &encrypt(&sk, &x).unwrap()).unwrap();
    // The only flush is the one materializing the output.
    assert_eq!(stats.flushes, 1);
    assert_eq!(stats.quantizations, 1);
    let y = decrypt(&sk, &ct).unwrap();
    assert_eq!(y.shape(), &[1, 8]);
    assert!(y.max_abs_diff(&ops::relu(&x).reshaped(vec![1, 8])) <= 2.0 / 63.0);
}

#[test]
fn lenet_under_tfhe_keeps_the_cleartext_argmax() {
    let cm = calibrated(FixtureName::LeNet5);
    let kp = derive_tfhe_params(&cm, 128, DEFAULT_MSG_BITS, DomainMethod::MinMax).unwrap();
    let (sk, ek) = keygen(&kp, [7; 32]);
    let p = plan(&cm, &kp, &PlanOptions::default()).unwrap();
    assert!(p.steps.iter().any(|s| matches!(s.lowering, Lowering::Lut(_))));
    let ev = Evaluator::new(&ek);
    let x = build_fixture(FixtureName::LeNet5, 1).sample_inputs(1, 11).remove(0);
    let (ct, stats) = run_inference(&p, &ev, &encrypt(&sk, &x).unwrap()).unwrap();
    let y = decrypt(&sk, &ct).unwrap();
    assert_eq!(y.argmax(), cleartext_forward(&cm.graph, &x).unwrap().0.argmax());
    assert_eq!(stats.levels_consumed, 0);
}

#[test]
fn ckks_relu_requires_a_degree() {
    let cm = calibrated(FixtureName::CryptoNets);
    let kp = derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap();
    let opts =
        PlanOptions { relu: ReluPolicy { degree: None, domain: DomainMethod::mean_std() }, ..PlanOptions::default() };
    match plan(&cm, &kp, &opts) {
        Err(PlanError::UnconfiguredRelu(node)) => assert_eq!(node, "relu1"),
        other => panic!("expected UnconfiguredRelu, got {other:?}"),
    }
    // TFHE needs no degree.
    let kp = derive_tfhe_params(&cm, 128, DEFAULT_MSG_BITS, DomainMethod::MinMax).unwrap();
    assert!(plan(&cm, &kp, &opts).is_ok());
}

#[test]
fn oversized_matrix_is_refused_with_the_node_named() {
    let cm = calibrated(FixtureName::CryptoNets);
    let kp = derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap();
    let opts = PlanOptions { matrix_cap: 100_000, ..PlanOptions::default() };
    match plan(&cm, &kp, &opts) {
        Err(PlanError::MatrixTooLarge { node, rows, cols, .. }) => {
            assert_eq!((node.as_str(), rows, cols), ("conv1", 4 * 10 * 10, 1024));
        }
        other => panic!("expected MatrixTooLarge, got {other:?}"),
    }
}

#[test]
fn relu_polynomials_use_the_configured_domain() {
    let cm = calibrated(FixtureName::CryptoNets);
    let kp = derive_ckks_params(&cm, ReluDegree::Three, 128).unwrap();
    let p = plan(&cm, &kp, &PlanOptions::default()).unwrap();
    let polys = p.polynomials();
    assert_eq!(polys.len(), 2);
    let d = cm.edge_interval("conv1_out", DomainMethod::mean_std()).unwrap();
    assert_eq!(polys["relu1"].domain, d);
    assert_eq!(polys["relu1"].degree(), 3);
}

#[test]
fn folding_equivalence_on_random_stacks() {
    let r = folding_equivalence(100, 6, 99);
    assert_eq!(r.identical, 100);
    assert_eq!((r.min_quantizations_per_flush, r.max_quantizations_per_flush), (1, 1));
}

#[test]
fn identity_model_agrees_everywhere() {
    let mut g = graph(vec![1, 10]);
    let eye: Vec<f64> = (0..100).map(|i| if i % 11 == 0 { 1.0 } else { 0.0 }).collect();
    constant(&mut g, "w", Tensor::new(vec![10, 10], eye));
    g.nodes.push(Node::new("fc", OpKind::MatMul, &["x", "w"], &["y"]));
    g.outputs = vec!["y".into()];
    let g = infer_shapes(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut sample = || Tensor::new(vec![1, 10], (0..10).map(|_| rng.random_range(0.0..1.0)).collect());
    let calib = CalibrationSet::new("x", (0..20).map(|_| sample()).collect());
    let inputs: Vec<Tensor> = (0..10).map(|_| sample()).collect();
    let r = agreement_experiment(&g, &calib, &inputs, &KeyparamsOptions::default(), 1).unwrap();
    assert_eq!(r.agreement_rate, 1.0);
    assert_eq!(r.levels_consumed, 1);
    assert!(r.max_relative_error < 1e-6);
}

#[test]
fn tfhe_hint_bounds_are_calibrated_ranges() {
    let cm = calibrated(FixtureName::CryptoNets);
    let kp = derive_tfhe_params(&cm, 128, DEFAULT_MSG_BITS, DomainMethod::MinMax).unwrap();
    let p = plan(&cm, &kp, &PlanOptions::default()).unwrap();
    for s in &p.steps {
        let expected = cm.edge_interval(&s.output, DomainMethod::MinMax);
        assert_eq!(s.hint, expected, "{}", s.node);
        let Interval { lo, hi } = s.hint.unwrap();
        assert!(lo <= hi);
    }
}
