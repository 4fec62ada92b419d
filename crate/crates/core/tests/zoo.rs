use evsr::frame_io::Frame420;
use evsr::nn::{Form, ModelGraph, Shape, Tensor};
use evsr::resample::{chroma_to_444, upscale_420, FilterSpec};
use evsr::zoo::{
    analyze, build_etdsv2, bicubic_base, fsmd_init_state, fsmd_step, upscale_clip, EtdsConfig, ModelId,
    Upscaler, ZooError,
};
use evsr::MACS_BUDGET;

mod common;
use common::synthetic_clip;

fn within(actual: f64, target: f64, tol: f64) -> bool {
    (actual - target).abs() <= tol * target
}

// (model, params target, params tol, MACs target, MACs tol)
const TARGETS: [(ModelId, f64, f64, f64, f64); 8] = [
    (ModelId::SuperBicubicPpX3, 50_000.0, 0.15, 2.909e9, 0.15),
    (ModelId::SuperBicubicPpX4, 398_000.0, 0.15, 206.7e9, 0.15),
    (ModelId::BviRtvsrX3, 62_000.0, 0.15, 3.913e9, 0.15),
    (ModelId::BviRtvsrX4, 63_000.0, 0.15, 9.595e9, 0.15),
    (ModelId::FsmdX3, 1_624_000.0, 0.20, 93.69e9, 0.20),
    (ModelId::FsmdX4, 1_599_000.0, 0.20, 207.5e9, 0.20),
    (ModelId::Etdsv2, 136_600.0, 0.15, 35.56e9, 0.20),
    (ModelId::SafmLiteX4, 40_000.0, 0.20, 10.22e9, 0.20),
];

#[test]
fn complexity_matches_published_budgets() {
    for (id, p, ptol, m, mtol) in TARGETS {
        let (w, h) = id.track_resolution();
        let c = analyze(id, w, h).unwrap();
        assert!(within(c.params as f64, p, ptol), "{id} params {}", c.params);
        assert!(within(c.macs_per_frame as f64, m, mtol), "{id} MACs {}", c.macs_per_frame);
        assert!(c.macs_per_frame <= MACS_BUDGET && c.within_budget, "{id}");
    }
}

#[test]
fn bvi_macs_per_pixel_matches_frame_cost() {
    let c = analyze(ModelId::BviRtvsrX3, 640, 360).unwrap();
    assert!((c.macs_per_pixel - c.macs_per_frame as f64 / (1920.0 * 1080.0)).abs() < 1e-9);
    // Published per-pixel figure is 1.887 K.
    assert!(within(c.macs_per_pixel, 1887.0, 0.15), "{}", c.macs_per_pixel);
}

fn count_blocks(g: &ModelGraph, prefix: &str) -> usize {
    g.nodes
        .iter()
        .filter(|n| n.id.starts_with(prefix) && n.id.ends_with(".skip"))
        .count()
}

#[test]
fn fsmd_block_counts() {
    let g3 = ModelId::FsmdX3.build(Form::Fused);
    assert_eq!((count_blocks(&g3, "extract."), count_blocks(&g3, "recon.")), (3, 10));
    let g4 = ModelId::FsmdX4.build(Form::Fused);
    assert_eq!((count_blocks(&g4, "extract."), count_blocks(&g4, "recon.")), (2, 10));
}

#[test]
fn every_model_produces_exact_geometry_on_a_small_clip() {
    let clip = synthetic_clip(8, 64, 36, 1);
    for id in ModelId::ALL {
        let out = upscale_clip(id, None, &clip).unwrap();
        let s = id.scale();
        assert_eq!(out.len(), 8, "{id}");
        for f in &out {
            assert_eq!((f.width(), f.height()), (64 * s, 36 * s), "{id}");
            assert_eq!((f.chroma_width(), f.chroma_height()), (32 * s, 18 * s), "{id}");
        }
    }
}

#[test]
fn missing_tensor_is_named() {
    let mut weights = ModelId::BviRtvsrX3.build(Form::Fused).export_weights();
    weights.remove("body.0.weight");
    match Upscaler::new(ModelId::BviRtvsrX3, Some(&weights)) {
        Err(ZooError::WeightMismatch { missing, extra }) => {
            assert_eq!(missing, vec!["body.0.weight".to_string()]);
            assert!(extra.is_empty());
        }
        other => panic!("expected WeightMismatch, got {other:?}"),
    }
    weights.push("stray", vec![1], vec![0.0]);
    weights.push("body.0.weight", vec![24, 24, 3, 3], vec![0.0; 24 * 24 * 9]);
    assert!(matches!(
        Upscaler::new(ModelId::BviRtvsrX3, Some(&weights)),
        Err(ZooError::WeightMismatch { extra, .. }) if extra == vec!["stray".to_string()]
    ));
}

#[test]
fn weights_round_trip_through_the_file_format() {
    let mut g = ModelId::SafmLiteX4.build(Form::Fused);
    g.init_random(9);
    let bytes = g.export_weights().to_bytes().unwrap();
    let loaded = evsr::nn::WeightSet::from_bytes(&bytes).unwrap();
    let up = Upscaler::new(ModelId::SafmLiteX4, Some(&loaded)).unwrap();
    assert_eq!(up.graph(), &g);
}

fn zeroed(id: ModelId) -> Upscaler {
    let mut up = Upscaler::new(id, None).unwrap();
    up.graph_mut().zero_weights(|_| true);
    up
}

#[test]
fn bvi_with_zero_body_echoes_bicubic() {
    let clip = synthetic_clip(2, 32, 18, 2);
    for id in [ModelId::BviRtvsrX3, ModelId::BviRtvsrX4] {
        let out = zeroed(id).upscale_clip(&clip).unwrap();
        for (lr, hr) in clip.iter().zip(&out) {
            assert_eq!(hr, &upscale_420(lr, id.scale(), FilterSpec::Bicubic).unwrap(), "{id}");
        }
    }
}

#[test]
fn fsmd_zero_weights_echo_base_and_keep_state_zero() {
    for id in [ModelId::FsmdX3, ModelId::FsmdX4] {
        let up = zeroed(id);
        let clip = synthetic_clip(3, 16, 12, 3);
        let mut state = fsmd_init_state(16, 12, id.state_channels().unwrap()).unwrap();
        for f in &clip {
            let x = chroma_to_444(f);
            let (hr, next) = fsmd_step(up.graph(), id.scale(), &x, &state).unwrap();
            assert_eq!(hr, bicubic_base(&x, id.scale()), "{id}");
            assert!(next.is_zero());
            state = next;
        }
    }
}

#[test]
fn fsmd_rejects_geometry_change() {
    let up = Upscaler::new(ModelId::FsmdX3, None).unwrap();
    let state = fsmd_init_state(16, 12, 77).unwrap();
    let frame = Tensor::zeros(Shape::new(1, 3, 14, 16));
    assert!(matches!(
        fsmd_step(up.graph(), 3, &frame, &state),
        Err(ZooError::GeometryChangedMidClip { expected: (16, 12), got: (16, 14) })
    ));
}

#[test]
fn fsmd_static_clip_settles() {
    // Motion and hidden state inputs are cut, so nothing can drift between identical frames.
    let mut up = Upscaler::new(ModelId::FsmdX3, None).unwrap();
    let cut = |name: &str| name.starts_with("motion_delta.");
    up.graph_mut().zero_weights(cut);
    let lr_channels = 12;
    up.graph_mut().for_each_weight_mut(&mut |name, dims, data| {
        if name == "fuse.weight" {
            let (o, i, k) = (dims[0], dims[1], dims[2] * dims[3]);
            for oc in 0..o {
                for ic in lr_channels..i {
                    data[(oc * i + ic) * k..(oc * i + ic + 1) * k].fill(0.0);
                }
            }
        }
    });
    let frame = synthetic_clip(1, 16, 12, 4).remove(0);
    let out = up.upscale_clip(&vec![frame; 4]).unwrap();
    for t in 1..out.len() {
        assert_eq!(out[t], out[t - 1], "t = {t}");
    }
}

#[test]
fn fsmd_reinit_gives_identical_first_frame() {
    let up = Upscaler::new(ModelId::FsmdX4, None).unwrap();
    let a = synthetic_clip(3, 16, 12, 5);
    let mut b = synthetic_clip(2, 16, 12, 6);
    b.insert(0, a[0].clone());
    assert_eq!(up.upscale_clip(&a).unwrap()[0], up.upscale_clip(&b).unwrap()[0]);
}

#[test]
fn recurrent_model_is_order_sensitive_stateless_is_not() {
    let clip = synthetic_clip(4, 16, 12, 7);
    let reversed: Vec<Frame420> = clip.iter().rev().cloned().collect();
    for id in [ModelId::FsmdX3, ModelId::SafmLiteX4, ModelId::SuperBicubicPpX3] {
        let up = Upscaler::new(id, None).unwrap();
        let fwd = up.upscale_clip(&clip).unwrap();
        let mut back = up.upscale_clip(&reversed).unwrap();
        back.reverse();
        if id.is_recurrent() {
            assert_ne!(fwd, back, "{id}");
            // Frame 0 of the forward pass saw no history, so only later frames differ.
            assert_ne!(fwd[1..], back[1..]);
        } else {
            assert_eq!(fwd, back, "{id}");
        }
    }
}

#[test]
fn fsmd_output_depends_only_on_the_past() {
    let up = Upscaler::new(ModelId::FsmdX3, None).unwrap();
    let clip = synthetic_clip(4, 16, 12, 8);
    let mut altered = clip.clone();
    altered[3] = synthetic_clip(1, 16, 12, 99).remove(0);
    let a = up.upscale_clip(&clip).unwrap();
    let b = up.upscale_clip(&altered).unwrap();
    assert_eq!(a[..3], b[..3]);
    assert_ne!(a[3], b[3]);
}

#[test]
fn etds_residual_branch_is_additive() {
    let mut full = build_etdsv2(&EtdsConfig::default());
    full.init_random(11);
    full.zero_weights(|n| n.starts_with("residual."));
    let mut backbone = build_etdsv2(&EtdsConfig {
        residual_branch: false,
        ..EtdsConfig::default()
    });
    let weights = full.export_weights();
    backbone.for_each_weight_mut(&mut |name, _, data| {
        data.copy_from_slice(&weights.get(name).unwrap().data);
    });
    let x = Tensor::from_fn(Shape::new(1, 3, 10, 12), |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
    assert_eq!(full.run_single(x.clone()).unwrap(), backbone.run_single(x).unwrap());
}

#[test]
fn safm_constant_input_is_well_defined() {
    let mut g = ModelId::SafmLiteX4.build(Form::Fused);
    g.init_random(12);
    let out = g.run_single(Tensor::filled(Shape::new(1, 3, 9, 13), 0.5)).unwrap();
    assert_eq!(out.shape(), Shape::new(1, 3, 36, 52));
    assert!(out.is_finite());
}

#[test]
fn superbicubic_training_and_fused_forms_agree_on_frames() {
    for id in [ModelId::SuperBicubicPpX3, ModelId::SuperBicubicPpX4] {
        let mut train = id.build(Form::Training);
        train.init_random(13);
        let fused = evsr::reparam::fuse_graph(&train).unwrap();
        assert!(fused.count_params() < train.count_params());
        let frame = chroma_to_444(&synthetic_clip(1, 16, 12, 14)[0]);
        let d = train
            .run_single(frame.clone())
            .unwrap()
            .max_abs_diff(&fused.run_single(frame).unwrap())
            .unwrap();
        assert!(d <= 1e-4, "{id}: {d}");
    }
}

#[test]
fn runs_are_bit_deterministic() {
    let clip = synthetic_clip(2, 16, 12, 15);
    for id in ModelId::ALL {
        let up = Upscaler::new(id, None).unwrap();
        assert_eq!(up.upscale_clip(&clip).unwrap(), up.upscale_clip(&clip).unwrap(), "{id}");
    }
}
