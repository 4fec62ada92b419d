use evsr::frame_io::Frame420;
use evsr::quality::psnr_y;
use evsr::resample::*;
use proptest::prelude::*;
use rand::Rng;

mod common;

const FILTERS: [FilterSpec; 5] = [
    FilterSpec::Lanczos(2),
    FilterSpec::Lanczos(3),
    FilterSpec::Lanczos(5),
    FilterSpec::Bicubic,
    FilterSpec::Nearest,
];

#[test]
fn taps_sum_to_one() {
    for filter in FILTERS {
        for (n_in, n_out) in [(1920, 640), (640, 1920), (13, 7), (7, 13), (9, 9), (5, 2), (3, 100)] {
            for taps in axis_taps(n_in, n_out, filter) {
                let sum: f64 = taps.weights.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "{filter} {n_in}->{n_out}: {sum}");
            }
        }
    }
}

#[test]
fn lanczos_kernel_matches_closed_form() {
    use std::f64::consts::PI;
    // sinc(x) sinc(x/a) written out independently.
    let reference = |x: f64, a: f64| {
        if x == 0.0 {
            1.0
        } else if x.abs() >= a {
            0.0
        } else {
            a * (PI * x).sin() * (PI * x / a).sin() / (PI * PI * x * x)
        }
    };
    for a in [2.0, 3.0, 5.0, 8.0] {
        for i in -100..=100 {
            let x = f64::from(i) * 0.0937;
            assert!((lanczos_kernel(x, a) - reference(x, a)).abs() < 1e-12, "x={x} a={a}");
        }
    }
}

#[test]
fn nearest_matches_brute_force_on_many_sizes() {
    let mut rng = common::rng(31);
    for _ in 0..30 {
        let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let (ow, oh) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let src: Vec<f32> = (0..w * h).map(|_| f32::from(rng.gen::<u8>())).collect();
        let out = resample_plane(&Plane::new(w, h, src.clone()), ow, oh, FilterSpec::Nearest).unwrap();
        assert_eq!(out.data, common::nearest_oracle(&src, w, h, ow, oh));
    }
}

#[test]
fn lanczos_identity_within_tolerance() {
    let mut rng = common::rng(32);
    let plane = Plane::new(31, 17, (0..31 * 17).map(|_| rng.gen_range(0.0..255.0)).collect());
    for filter in [FilterSpec::Lanczos(3), FilterSpec::Lanczos(5)] {
        let out = resample_plane(&plane, 31, 17, filter).unwrap();
        for (a, b) in out.data.iter().zip(&plane.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn ramp_round_trip_is_high_fidelity() {
    let original = common::ramp_frame(128, 72);
    for filter in [FilterSpec::Lanczos(3), FilterSpec::Lanczos(5), FilterSpec::Bicubic] {
        let lr = downscale_420(&original, 2, filter).unwrap();
        let back = upscale_420(&lr, 2, filter).unwrap();
        let p = psnr_y(&original, &back).unwrap();
        assert!(p >= 40.0, "{filter}: {p} dB");
    }
}

#[test]
fn constant_frames_stay_constant() {
    let f = Frame420::filled(33, 19, 77, 90, 200).unwrap();
    for filter in FILTERS {
        for factor in [2, 3, 4] {
            let down = downscale_420(&f, factor, filter).unwrap();
            assert!(down.y().iter().all(|&v| v == 77));
            assert!(down.cb().iter().all(|&v| v == 90));
            assert!(down.cr().iter().all(|&v| v == 200));
            let up = upscale_420(&f, factor, filter).unwrap();
            assert_eq!((up.width(), up.height()), (33 * factor, 19 * factor));
            assert!(up.y().iter().all(|&v| v == 77));
            assert!(up.cr().iter().all(|&v| v == 200));
        }
    }
}

#[test]
fn explicit_rung_geometry() {
    let f = Frame420::filled(1920, 1080, 50, 128, 128).unwrap();
    let rung = resize_420(&f, 480, 268, FilterSpec::LANCZOS5).unwrap();
    assert_eq!((rung.width(), rung.height()), (480, 268));
    assert_eq!((rung.chroma_width(), rung.chroma_height()), (240, 134));
}

#[test]
fn rounding_is_half_away_from_zero_then_clamped() {
    assert_eq!(quantize(2.5), 3);
    assert_eq!(quantize(2.4999), 2);
    assert_eq!(quantize(-0.5), 0);
    assert_eq!(quantize(254.5), 255);
    assert_eq!(quantize(300.0), 255);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn dc_invariance_any_size(
        w in 1usize..24, h in 1usize..24, ow in 1usize..48, oh in 1usize..48,
        v in 0u8..=255, f in 0usize..5,
    ) {
        let plane = Plane::filled(w, h, f32::from(v));
        let out = resample_plane(&plane, ow, oh, FILTERS[f]).unwrap();
        prop_assert!(out.data.iter().all(|&x| x == f32::from(v)));
    }
}
