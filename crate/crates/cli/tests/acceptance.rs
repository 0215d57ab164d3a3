//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use drift_core::baseline::TikhonovSolver;
use drift_core::dataset::DirectoryDataset;
use drift_core::detector::{calibrate, Decision, DetectorConfig, DetectorState};
use drift_core::evalharness::{report_text, run_experiment, ExperimentConfig, Method, Transition};
use drift_core::geometry::{ellipse_weights, NetworkGeometry, Point};
use drift_core::image::{ReconImage, TargetMask};
use drift_core::neural::{backward, forward, loss, DriftModel, ModelConfig};
use drift_core::postprocess::{canny_region, ede, iou, rpd, CannyConfig};
use drift_core::preprocess::{impute_stream, RssTensor};
use drift_core::simulator::{generate_dataset, synthesize_frame, EnvironmentProfile, FrameParams, RssFrame, SimConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let ok = pass && in_time;
    let budget = limit.map(|l| format!(" / {:.0}s", l.as_secs_f64())).unwrap_or_default();
    println!(
        "criterion {id:>2} [{name}]: {} ({detail}; {:.2}s{budget})",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {id} failed: {detail}");
}

#[test]
fn c01_reference_numbers_in_report_footer() {
    let t = Instant::now();
    let split = drift_core::dataset::SplitPlan {
        k: 2,
        train_ids: vec![],
        finetune_id: "a".into(),
        test_ids: vec!["b".into(), "c".into()],
    };
    let text = report_text(&[], &split);
    let needles = ["RPD 0.07", "IoU 0.90", "EDE 1.85 cm", "EDE 2.29 cm", "23.2%"];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !text.contains(n)).collect();
    verdict(
        1,
        "reference constants",
        missing.is_empty(),
        t.elapsed(),
        None,
        &format!("missing {missing:?}"),
    );
}

fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        channels: rng.gen_range(1..=3),
        nodes: 2 * rng.gen_range(2..=3),
        branch_width1: rng.gen_range(1..=3),
        branch_width2: rng.gen_range(1..=3),
        fused_width: rng.gen_range(1..=3),
        feature_side: rng.gen_range(2..=4),
        grid_px: rng.gen_range(3..=7),
        decoder_width: rng.gen_range(1..=3),
    }
}

#[test]
fn c02_gradients_match_finite_differences() {
    let t = Instant::now();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failures = 0usize;
    for trial in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let config = random_tiny_config(&mut rng);
        let mut model = DriftModel::with_config(config, "g".into(), trial).unwrap();
        // make the attention map non-trivial so its gradient is exercised
        for v in model.params.tensors[drift_core::neural::ATTENTION].data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let n = config.channels * config.nodes * config.nodes;
        let x = RssTensor {
            channels: config.channels,
            nodes: config.nodes,
            values: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            frames: 0..1,
        };
        let mask = TargetMask::from_fn(config.grid_px, |_, _| rng.gen_bool(0.3));
        let grads = backward(&model, std::slice::from_ref(&x), &mask).unwrap();
        let eval = |m: &DriftModel| loss(&forward(m, &x).unwrap(), &mask).unwrap();
        for (i, g) in grads.grads.iter().enumerate() {
            let g = g.as_ref().expect("all tensors trainable");
            for j in 0..g.len() {
                let orig = model.params.tensors[i].data()[j];
                model.params.tensors[i].data_mut()[j] = orig + h;
                let up = eval(&model);
                model.params.tensors[i].data_mut()[j] = orig - h;
                let down = eval(&model);
                model.params.tensors[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (g[j] - numeric).abs();
                let scale = g[j].abs().max(numeric.abs());
                if err > 1e-3 * scale + 1e-7 {
                    failures += 1;
                }
                if scale > 1e-6 {
                    worst = worst.max(err / scale);
                }
                checked += 1;
            }
        }
    }
    verdict(
        2,
        "gradient oracle",
        failures == 0,
        t.elapsed(),
        Some(Duration::from_secs(30)),
        &format!("6 models, {checked} entries, {failures} outside tolerance, worst relative error {worst:.2e}"),
    );
}

fn random_boundary_point(rng: &mut ChaCha8Rng, side: f64) -> Point {
    let s = rng.gen_range(0.0..4.0 * side);
    match (s / side) as u32 {
        0 => Point::new(s, 0.0),
        1 => Point::new(side, s - side),
        2 => Point::new(3.0 * side - s, side),
        _ => Point::new(0.0, (4.0 * side - s).min(side)),
    }
}

#[test]
fn c03_weight_matrix_matches_brute_force() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for nodes in 3..=6 {
        for grid in 2..=4 {
            for side in [24.0, 72.0] {
                for placement in 0..3 {
                    let geom = if placement == 0 {
                        NetworkGeometry::new(side, nodes, grid, 1).unwrap()
                    } else {
                        let pts = (0..nodes).map(|_| random_boundary_point(&mut rng, side)).collect();
                        match NetworkGeometry::with_nodes(side, pts, grid, 1) {
                            Ok(g) => g,
                            Err(_) => continue,
                        }
                    };
                    for lambda in [1.0, 4.0, 20.0] {
                        let w = ellipse_weights(&geom, lambda).unwrap();
                        let px = side / grid as f64;
                        let mut k = 0;
                        for a in 0..nodes {
                            for b in 0..nodes {
                                if a == b {
                                    continue;
                                }
                                let (pa, pb) = (geom.nodes()[a], geom.nodes()[b]);
                                let d = ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
                                for row in 0..grid {
                                    for col in 0..grid {
                                        let (x, y) = ((col as f64 + 0.5) * px, (row as f64 + 0.5) * px);
                                        let da = ((x - pa.x).powi(2) + (y - pa.y).powi(2)).sqrt();
                                        let db = ((x - pb.x).powi(2) + (y - pb.y).powi(2)).sqrt();
                                        let want = if da + db <= d + lambda { 1.0 / d.sqrt() } else { 0.0 };
                                        if (w.get(k, row * grid + col) - want).abs() > 1e-12 {
                                            mismatches += 1;
                                        }
                                    }
                                }
                                k += 1;
                            }
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    verdict(
        3,
        "weight-matrix oracle",
        mismatches == 0,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        &format!("{cases} geometry/lambda cases, {mismatches} mismatched entries"),
    );
}

#[test]
fn c04_linear_solver_oracle() {
    let t = Instant::now();
    let geom = NetworkGeometry::default();
    let w = ellipse_weights(&geom, 4.0).unwrap();
    let (links, pixels) = (w.rows(), w.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let solver = TikhonovSolver::new(&w, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dg: Vec<f64> = (0..links).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = solver.solve(&dg).unwrap();
        let wx = w.apply(x.values()).unwrap();
        let wtwx = w.apply_transpose(&wx).unwrap();
        let rhs = w.apply_transpose(&dg).unwrap();
        let rhs_norm = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let resid = (0..pixels)
            .map(|m| (wtwx[m] + x.values()[m] - rhs[m]).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(resid / rhs_norm);
    }

    let sharp = TikhonovSolver::new(&w, 1e-3).unwrap();
    let mut hits = 0;
    for _ in 0..20 {
        let target = rng.gen_range(0..pixels);
        let mut r = vec![0.0; pixels];
        r[target] = 1.0;
        let x = sharp.solve(&w.apply(&r).unwrap()).unwrap();
        let best = x.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let argmax = x.values().iter().position(|v| *v == best).unwrap();
        // pixels whose weight columns are identical are indistinguishable
        let same_column = (0..links).all(|l| w.get(l, argmax) == w.get(l, target));
        if argmax == target || same_column {
            hits += 1;
        }
    }
    verdict(
        4,
        "linear-solver oracle",
        worst < 1e-8 && hits >= 19,
        t.elapsed(),
        Some(Duration::from_secs(30)),
        &format!("worst residual {worst:.2e} x |W^T dg|, argmax recovered {hits}/20"),
    );
}

fn detector_stream(geom: &NetworkGeometry, seed: u64, frames: usize, shift_at: Option<usize>) -> Vec<RssFrame> {
    let w = ellipse_weights(geom, 4.0).unwrap();
    let r = vec![0.0; geom.pixel_count()];
    let (links, channels) = (geom.link_count(), geom.channels());
    let quiet = EnvironmentProfile::quiet("A", links, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shifted = quiet.clone();
    for l in sample(&mut rng, links, links / 5) {
        let s = if rng.gen_bool(0.5) { 5.0 } else { -5.0 };
        for c in 0..channels {
            shifted.link_bias_dbm[l * channels + c] = s;
        }
    }
    let params = FrameParams::default();
    (0..frames)
        .map(|t| {
            let env = match shift_at {
                Some(s) if t >= s => &shifted,
                _ => &quiet,
            };
            synthesize_frame(geom, &w, &r, env, &params, rng.gen(), t).unwrap()
        })
        .collect()
}

#[test]
fn c05_detector_fires_on_shifts_only() {
    let t = Instant::now();
    let geom = NetworkGeometry::default();
    let config = DetectorConfig {
        window: 10,
        alpha: 1.2,
        ..DetectorConfig::for_links(geom.link_count())
    };
    let calib = detector_stream(&geom, 999, 200, None);
    let sigma = calibrate(&calib, &config).unwrap();

    let mut timely = 0;
    for s in 0..50 {
        let stream = detector_stream(&geom, s, 160, Some(100));
        let mut det = DetectorState::calibrated(config, sigma).unwrap();
        let first = stream
            .iter()
            .position(|f| det.step(f).unwrap() == Decision::Change);
        if first.is_some_and(|f| (100..=110).contains(&f)) {
            timely += 1;
        }
    }
    let mut false_alarms = 0;
    for s in 0..50 {
        let stream = detector_stream(&geom, 500 + s, 160, None);
        let mut det = DetectorState::calibrated(config, sigma).unwrap();
        false_alarms += stream
            .iter()
            .filter(|f| det.step(f).unwrap() == Decision::Change)
            .count();
    }
    verdict(
        5,
        "change detector",
        timely >= 48 && false_alarms == 0,
        t.elapsed(),
        Some(Duration::from_secs(60)),
        &format!("shift detected in [100,110] for {timely}/50, {false_alarms} static false alarms"),
    );
}

#[test]
fn c06_metrics_match_pixel_counting() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..100 {
        let side = rng.gen_range(2..=36);
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.01..1.0));
        let a = TargetMask::from_fn(side, |_, _| rng.gen_bool(pa));
        let mut b = TargetMask::from_fn(side, |_, _| rng.gen_bool(pb));
        if b.is_empty() {
            b.set(0, 0, true);
        }
        let px = rng.gen_range(0.5..4.0);
        let (mut inter, mut union, mut na, mut nb) = (0usize, 0usize, 0usize, 0usize);
        for r in 0..side {
            for c in 0..side {
                let (x, y) = (a.get(r, c), b.get(r, c));
                inter += (x && y) as usize;
                union += (x || y) as usize;
                na += x as usize;
                nb += y as usize;
            }
        }
        let want_iou = inter as f64 / union as f64;
        let want_rpd = (na as f64 - nb as f64).abs() / nb as f64;
        // diameter of the circle whose area is the absolute area difference
        let area_diff = na.abs_diff(nb) as f64 * px * px;
        let want_ede = 2.0 * (area_diff / std::f64::consts::PI).sqrt();
        let got_ede = ede(&a, &b, px).unwrap();
        if iou(&a, &b).unwrap() != want_iou
            || rpd(&a, &b).unwrap() != want_rpd
            || (got_ede - want_ede).abs() > 1e-12 * want_ede.max(1e-300)
        {
            bad += 1;
        }
    }
    verdict(
        6,
        "metric oracles",
        bad == 0,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        &format!("{bad}/100 mask pairs disagree"),
    );
}

#[test]
fn c07_canny_recovers_disks() {
    let t = Instant::now();
    let cfg = CannyConfig::default();
    let n = 36;
    let mut worst = 1.0f64;
    for radius in 4..=10 {
        for (cx, cy) in [(17.5, 17.5), (15.0, 19.0), (18.3, 16.6)] {
            let inside = |row: usize, col: usize| {
                let (x, y) = (col as f64 - cx, row as f64 - cy);
                (x * x + y * y).sqrt() <= radius as f64
            };
            let img = ReconImage::from_fn(n, |r, c| if inside(r, c) { 1.0 } else { 0.0 });
            let truth = TargetMask::from_fn(n, inside);
            let got = iou(&canny_region(&img, &cfg).unwrap(), &truth).unwrap();
            println!("radius {radius} centre ({cx}, {cy}): IoU {got:.3}");
            worst = worst.min(got);
        }
    }
    let constant_empty = [0.0, 0.3, -7.0]
        .iter()
        .all(|v| canny_region(&ReconImage::new(n, vec![*v; n * n]).unwrap(), &cfg).unwrap().is_empty());
    verdict(
        7,
        "canny fill",
        worst >= 0.9 && constant_empty,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        &format!("worst disk IoU {worst:.3}, constant images empty: {constant_empty}"),
    );
}

/// Synthetic campaign of the end-to-end trend check.
fn trend_sim() -> SimConfig {
    SimConfig {
        seed: 7,
        tubers: 26,
        envs: vec!["E1".into(), "E2".into()],
        max_bias_dbm: 5.0,
        ..SimConfig::default()
    }
}

#[test]
fn c08_finetuning_trend() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    generate_dataset(&trend_sim(), &ds).unwrap();
    let mut config = ExperimentConfig {
        dataset: ds,
        output_dir: tmp.path().join("out"),
        k: 2,
        env_sequence: vec![Transition::new("E1", "E2"), Transition::new("E1", "E1")],
        triptychs: false,
        ..ExperimentConfig::default()
    };
    config.train.epochs = 50;
    let report = run_experiment(&config).unwrap();
    let row = |from: &str, to: &str, m: Method| report.row(&Transition::new(from, to), m).unwrap().clone();
    let (plain, tuned) = (
        row("E1", "E2", Method::NeuralNoFinetune),
        row("E1", "E2", Method::NeuralFinetuned),
    );
    let (ctl_plain, ctl_tuned) = (
        row("E1", "E1", Method::NeuralNoFinetune),
        row("E1", "E1", Method::NeuralFinetuned),
    );
    let gain = tuned.iou - plain.iou;
    let control = (ctl_tuned.iou - ctl_plain.iou).abs();
    let pass = gain >= 0.05 && tuned.ede_cm < plain.ede_cm && control <= 0.01;
    verdict(
        8,
        "continual-learning trend",
        pass,
        t.elapsed(),
        Some(Duration::from_secs(15 * 60)),
        &format!(
            "E1->E2 IoU {:.4} -> {:.4} (gain {gain:.4}), EDE {:.3} -> {:.3} cm; E1->E1 |dIoU| {control:.4}",
            plain.iou, tuned.iou, plain.ede_cm, tuned.ede_cm
        ),
    );
}

fn drift(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_drift"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRIFT_SEED")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c09_reruns_are_byte_identical() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let sim = [
        "--seed", "9", "--tubers", "5", "--rotations", "2", "--envs", "E1,E2", "--set", "nodes=8", "--set",
        "grid_px=12", "--set", "channels=4", "--set", "dynamic_tubers=4", "--set", "side_cm=24", "--set",
        "placement_radius_cm=5",
    ];
    let mut identical = Vec::new();
    for run in ["a", "b"] {
        let mut args = vec!["gen", "--out"];
        let out = format!("ds_{run}");
        args.push(&out);
        args.extend_from_slice(&sim);
        drift(&args, d);
    }
    identical.push(("gen", tree(&d.join("ds_a")) == tree(&d.join("ds_b"))));
    DirectoryDataset::open(&d.join("ds_a")).unwrap();

    for run in ["a", "b"] {
        let ckpt = format!("m_{run}.ckpt");
        let loss = format!("loss_{run}.csv");
        drift(&["train", "--dataset", "ds_a", "--out", &ckpt, "--epochs", "2", "--loss-csv", &loss], d);
    }
    let same = |a: &str, b: &str| std::fs::read(d.join(a)).unwrap() == std::fs::read(d.join(b)).unwrap();
    identical.push(("train", same("m_a.ckpt", "m_b.ckpt") && same("loss_a.csv", "loss_b.csv")));

    for run in ["a", "b"] {
        let out = format!("eval_{run}");
        drift(
            &["eval", "--dataset", "ds_a", "--out", &out, "--transitions", "E1->E2,E1->E1", "--k", "1", "--epochs", "1"],
            d,
        );
    }
    identical.push(("eval", tree(&d.join("eval_a")) == tree(&d.join("eval_b"))));
    let failed: Vec<&str> = identical.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        9,
        "determinism",
        failed.is_empty(),
        t.elapsed(),
        None,
        &format!("gen/train/eval reruns, differing outputs: {failed:?}"),
    );
}

#[test]
fn c10_streaming_imputation_equals_forward_fill() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    for _ in 0..20 {
        let (links, channels) = (rng.gen_range(1..8), rng.gen_range(1..4));
        let frames_n = rng.gen_range(1..40);
        let drop = rng.gen_range(0.0..0.9);
        let fallback = rng.gen_range(-80.0..-40.0);
        let frames: Vec<RssFrame> = (0..frames_n)
            .map(|t| RssFrame {
                timestamp: t,
                links,
                channels,
                values: (0..links * channels)
                    .map(|_| (!rng.gen_bool(drop)).then(|| rng.gen_range(-90.0..-20.0)))
                    .collect(),
            })
            .collect();
        let online = impute_stream(&frames, fallback).unwrap();
        for e in 0..links * channels {
            // offline pass over one (link, channel) series
            let series: Vec<Option<f64>> = frames.iter().map(|f| f.values[e]).collect();
            let mut filled = Vec::with_capacity(series.len());
            for (i, v) in series.iter().enumerate() {
                filled.push(match v {
                    Some(v) => *v,
                    None => series[..i].iter().rev().find_map(|p| *p).unwrap_or(fallback),
                });
            }
            if online.iter().map(|f| f.values[e]).collect::<Vec<_>>() != filled.into_iter().map(Some).collect::<Vec<_>>() {
                bad += 1;
            }
        }
    }
    verdict(
        10,
        "imputation oracle",
        bad == 0,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        &format!("{bad} series differ over 20 loss patterns"),
    );
}
