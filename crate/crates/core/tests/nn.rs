use evsr::nn::ops::{conv2d, pixel_shuffle, pixel_unshuffle};
use evsr::nn::{ConvSpec, Form, GraphBuilder, Shape, Tensor};
use evsr::zoo::ModelId;
use rand::Rng;

mod common;

#[test]
fn conv_matches_naive_reference() {
    let mut rng = common::rng(41);
    for _ in 0..100 {
        let spec = common::random_conv(&mut rng, 8);
        let shape = Shape::new(rng.gen_range(1..3), spec.in_ch, rng.gen_range(3..17), rng.gen_range(3..17));
        let x = common::random_tensor(&mut rng, shape, 1.0);
        let d = conv2d(&x, &spec)
            .unwrap()
            .max_abs_diff(&common::naive_conv2d(&x, &spec))
            .unwrap();
        assert!(d <= 1e-5, "{d}");
    }
}

#[test]
fn conv_is_linear() {
    let mut rng = common::rng(42);
    for _ in 0..10 {
        let spec = common::random_conv(&mut rng, 6);
        let no_bias = ConvSpec {
            bias: vec![0.0; spec.out_ch],
            ..spec.clone()
        };
        let shape = Shape::new(1, spec.in_ch, 9, 11);
        let x = common::random_tensor(&mut rng, shape, 10.0);
        let y = common::random_tensor(&mut rng, shape, 10.0);
        let (a, b) = (rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0));
        let mixed = Tensor::from_fn(shape, |n, c, h, w| a * x.at(n, c, h, w) + b * y.at(n, c, h, w));
        let lhs = conv2d(&mixed, &spec).unwrap();
        let cx = conv2d(&x, &no_bias).unwrap();
        let cy = conv2d(&y, &no_bias).unwrap();
        let zero = conv2d(&Tensor::zeros(shape), &spec).unwrap();
        let scale = lhs.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        for i in 0..lhs.data().len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i] + zero.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-4 * scale);
        }
    }
}

#[test]
fn shuffle_pairs_are_exact_inverses() {
    let mut rng = common::rng(43);
    for r in [2, 3, 4] {
        let x = common::random_tensor(&mut rng, Shape::new(2, 3, 4 * r, 2 * r), 5.0);
        assert_eq!(pixel_shuffle(&pixel_unshuffle(&x, r).unwrap(), r).unwrap(), x);
        let y = common::random_tensor(&mut rng, Shape::new(1, 2 * r * r, 3, 5), 5.0);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&y, r).unwrap(), r).unwrap(), y);
    }
    let c = Tensor::filled(Shape::new(1, 9, 2, 2), 0.7);
    let s = pixel_shuffle(&c, 3).unwrap();
    assert_eq!(s.shape(), Shape::new(1, 1, 6, 6));
    assert!(s.data().iter().all(|&v| v == 0.7));
}

#[test]
fn empty_graph_has_no_params() {
    let mut b = GraphBuilder::new("empty", Form::Fused);
    let x = b.input("x", 3);
    b.output(&x);
    let g = b.finish();
    assert_eq!(g.count_params(), 0);
    assert_eq!(g.count_macs_single(Shape::new(1, 3, 8, 8)).unwrap(), 0);
}

#[test]
fn every_model_runs_finite_with_declared_shape() {
    let mut rng = common::rng(44);
    for id in ModelId::ALL {
        let mut g = id.build(Form::Fused);
        g.init_random(rng.gen());
        let shapes = id.input_shapes(20, 14);
        let inferred = g.infer_shapes(&shapes).unwrap();
        let inputs = shapes
            .iter()
            .map(|(k, s)| (k.clone(), common::random_tensor(&mut rng, *s, 1.0)))
            .collect();
        let a = g.run(&inputs).unwrap();
        let b = g.run(&inputs).unwrap();
        for (name, t) in &a {
            assert!(t.is_finite(), "{id} {name}");
            assert_eq!(t.shape(), inferred[name], "{id} {name}");
            assert_eq!(t.data(), b[name].data(), "{id} {name} not deterministic");
        }
    }
}

#[test]
fn weight_file_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.evsrw");
    let mut g = ModelId::BviRtvsrX4.build(Form::Fused);
    g.init_random(45);
    g.export_weights().save(&path).unwrap();
    let mut h = ModelId::BviRtvsrX4.build(Form::Fused);
    h.load_weights(&evsr::nn::WeightSet::load(&path).unwrap()).unwrap();
    let x = Tensor::from_fn(Shape::new(1, 3, 8, 6), |_, c, y, x| (c + y + x) as f32 / 20.0);
    assert_eq!(g.run_single(x.clone()).unwrap(), h.run_single(x).unwrap());
}
