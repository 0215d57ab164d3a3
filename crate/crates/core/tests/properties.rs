use drift_core::baseline::{attenuation_vector, ReferenceRss, TikhonovSolver};
use drift_core::geometry::{ellipse_weights, NetworkGeometry};
use drift_core::image::{ReconImage, TargetMask};
use drift_core::postprocess::{canny_region, ede, iou, rpd, CannyConfig};
use drift_core::preprocess::{impute_stream, ImputationState};
use drift_core::simulator::{synthesize_frame, EnvironmentProfile, FrameParams, RssFrame};
use proptest::prelude::*;

fn mask_strategy(side: usize) -> impl Strategy<Value = TargetMask> {
    prop::collection::vec(any::<bool>(), side * side)
        .prop_map(move |bits| TargetMask::from_pixels(side, bits.into_iter().map(u8::from).collect()).unwrap())
}

fn small_geometry() -> NetworkGeometry {
    NetworkGeometry::new(24.0, 6, 6, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in mask_strategy(6), b in mask_strategy(6)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rpd_and_ede_vanish_on_equal_counts(gt in mask_strategy(6)) {
        prop_assume!(!gt.is_empty());
        let mut shuffled = gt.pixels().to_vec();
        shuffled.reverse();
        let est = TargetMask::from_pixels(6, shuffled).unwrap();
        prop_assert_eq!(rpd(&est, &gt).unwrap(), 0.0);
        prop_assert_eq!(ede(&est, &gt, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn ede_scales_with_pixel_size(a in mask_strategy(5), b in mask_strategy(5), s in 0.1f64..10.0) {
        let base = ede(&a, &b, 1.0).unwrap();
        let scaled = ede(&a, &b, s).unwrap();
        prop_assert!((scaled - s * base).abs() <= 1e-12 * (1.0 + scaled));
        prop_assert!((base - ede(&b, &a, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn canny_commutes_with_translation(r in 2.5f64..5.0, dx in -4i32..=4, dy in -4i32..=4) {
        let n = 32usize;
        let disk = |cx: f64, cy: f64| ReconImage::from_fn(n, |row, col| {
            let (x, y) = (col as f64 - cx, row as f64 - cy);
            if (x * x + y * y).sqrt() <= r { 1.0 } else { 0.0 }
        });
        let cfg = CannyConfig::default();
        let a = canny_region(&disk(15.5, 15.5), &cfg).unwrap();
        let b = canny_region(&disk(15.5 + dx as f64, 15.5 + dy as f64), &cfg).unwrap();
        let shifted = TargetMask::from_fn(n, |row, col| {
            let (sr, sc) = (row as i32 - dy, col as i32 - dx);
            (0..n as i32).contains(&sr) && (0..n as i32).contains(&sc) && a.get(sr as usize, sc as usize)
        });
        prop_assert_eq!(b, shifted);
    }

    #[test]
    fn canny_ignores_affine_intensity(scale in 0.01f64..100.0, offset in -50.0f64..50.0) {
        let n = 24usize;
        let img = |s: f64, o: f64| ReconImage::from_fn(n, |row, col| {
            let (x, y) = (col as f64 - 11.5, row as f64 - 11.5);
            o + s * (-(x * x + y * y) / 18.0).exp()
        });
        let cfg = CannyConfig::default();
        prop_assert_eq!(canny_region(&img(1.0, 0.0), &cfg).unwrap(), canny_region(&img(scale, offset), &cfg).unwrap());
    }

    #[test]
    fn tikhonov_is_linear(
        g1 in prop::collection::vec(-5.0f64..5.0, 30),
        g2 in prop::collection::vec(-5.0f64..5.0, 30),
        a in -3.0f64..3.0,
    ) {
        let geom = small_geometry();
        let w = ellipse_weights(&geom, 4.0).unwrap();
        let solver = TikhonovSolver::new(&w, 0.5).unwrap();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + y).collect();
        let (x1, x2, xm) = (solver.solve(&g1).unwrap(), solver.solve(&g2).unwrap(), solver.solve(&mix).unwrap());
        for i in 0..xm.values().len() {
            let want = a * x1.values()[i] + x2.values()[i];
            prop_assert!((xm.values()[i] - want).abs() < 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn noiseless_frames_follow_the_forward_model(
        r in prop::collection::vec(0.0f64..3.0, 36),
        baseline in -70.0f64..-40.0,
        seed in any::<u64>(),
    ) {
        let geom = small_geometry();
        let w = ellipse_weights(&geom, 4.0).unwrap();
        let env = EnvironmentProfile::random("E", geom.link_count(), geom.channels(), 5.0, seed).unwrap();
        let params = FrameParams { baseline_dbm: baseline, noise_sigma_dbm: 0.0, burst: false };
        let frame = synthesize_frame(&geom, &w, &r, &env, &params, seed, 0).unwrap();
        let shadow = w.apply(&r).unwrap();
        for l in 0..geom.link_count() {
            for c in 0..geom.channels() {
                let want = baseline - shadow[l] + env.bias(l, c);
                prop_assert!((frame.get(l, c).unwrap() - want).abs() < 1e-12);
            }
        }
        // more attenuation never raises any RSS
        let heavier: Vec<f64> = r.iter().map(|v| v + 0.5).collect();
        let frame2 = synthesize_frame(&geom, &w, &heavier, &env, &params, seed, 0).unwrap();
        for (a, b) in frame.values.iter().zip(&frame2.values) {
            prop_assert!(b.unwrap() <= a.unwrap() + 1e-12);
        }
    }

    #[test]
    fn attenuation_of_reference_is_zero(vals in prop::collection::vec(-80.0f64..-30.0, 12)) {
        let f = RssFrame::from_dense(0, 4, 3, &vals).unwrap();
        let reference = ReferenceRss::from_frames(std::slice::from_ref(&f), 1).unwrap();
        prop_assert!(attenuation_vector(&f, &reference).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn imputation_matches_offline_forward_fill(
        pattern in prop::collection::vec(prop::collection::vec(prop::option::weighted(0.7, -90.0f64..-20.0), 6), 1..15),
        fallback in -70.0f64..-40.0,
    ) {
        let frames: Vec<RssFrame> = pattern
            .iter()
            .enumerate()
            .map(|(t, v)| RssFrame { timestamp: t, links: 3, channels: 2, values: v.clone() })
            .collect();
        let online = impute_stream(&frames, fallback).unwrap();
        let mut last = vec![fallback; 6];
        for (t, f) in frames.iter().enumerate() {
            for (e, v) in f.values.iter().enumerate() {
                if let Some(v) = v {
                    last[e] = *v;
                }
            }
            prop_assert_eq!(online[t].values.iter().map(|v| v.unwrap()).collect::<Vec<_>>(), last.clone());
        }
        // complete frames pass through untouched
        let mut st = ImputationState::new(3, 2, fallback);
        let full = RssFrame::from_dense(0, 3, 2, &[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        prop_assert_eq!(st.impute(&full).unwrap(), full);
    }
}
