//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mipslice-cli --test acceptance`; pass a substring
//! to run only matching criteria, e.g. `-- determinism`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mipslice_core::eval::{interrater_stats, localization_errors};
use mipslice_core::inference::{predict, sliding_window_predict, time_median};
use mipslice_core::mip::{project_frontal, project_sagittal_restricted, threshold_and_quantize, IntensityDomain, MipImage, View};
use mipslice_core::models::{Model, ModelConfig, Variant};
use mipslice_core::phantom::{generate_dataset, generate_phantom, sample_rng, PhantomConfig};
use mipslice_core::targets::{make_confidence_map_1d, make_confidence_map_2d, sigma_schedule};
use mipslice_core::training::{loss_l2, loss_l2_grad, train, Sample, TrainConfig};
use mipslice_core::volume_io::{Spacing, Volume3D};
use mipslice_nn::{Layer, TrainContext};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mip_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for i in 0..100 {
        let (d0, d1, d2) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let data = Array3::from_shape_fn((d0, d1, d2), |_| rng.random_range(-1024.0f32..2000.0));
        let sx = rng.random_range(0.5..12.0);
        let vol = Volume3D::new(data.clone(), Spacing::new(rng.random_range(0.5..5.0), rng.random_range(0.5..2.0), sx), format!("v{i}"))
            .map_err(|e| e.to_string())?;

        let frontal = project_frontal(&vol);
        let mut expect_f = Array2::from_elem((d0, d2), f32::NEG_INFINITY);
        for a in 0..d0 {
            for b in 0..d1 {
                for c in 0..d2 {
                    if data[[a, b, c]] > expect_f[[a, c]] {
                        expect_f[[a, c]] = data[[a, b, c]];
                    }
                }
            }
        }

        let sag = project_sagittal_restricted(&vol, 20.0).map_err(|e| e.to_string())?;
        let centre = (d2 / 2) as i64;
        let half = (20.0 / sx).round() as i64;
        let mut expect_s = Array2::from_elem((d0, d1), f32::NEG_INFINITY);
        for a in 0..d0 {
            for b in 0..d1 {
                for c in 0..d2 as i64 {
                    if (c - centre).abs() <= half && data[[a, b, c as usize]] > expect_s[[a, b]] {
                        expect_s[[a, b]] = data[[a, b, c as usize]];
                    }
                }
            }
        }
        if frontal.pixels != expect_f || sag.pixels != expect_s {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(mismatches == 0 && secs < 10.0, format!("{mismatches}/100 volumes differ from brute force; {secs:.2} s (limit 10 s)"))
}

fn quantization_endpoints() -> Outcome {
    let hu_image = |values: Vec<f32>| MipImage {
        pixels: Array2::from_shape_vec((1, values.len()), values).unwrap(),
        spacing: [1.0, 1.0],
        domain: IntensityDomain::Hu,
        view: View::Frontal,
        source_id: "q".into(),
        slice_thickness_mm: None,
    };
    let q = threshold_and_quantize(&hu_image(vec![100.0, 1500.0, -1000.0, 99.9, 1500.1, 3000.0]));
    let got: Vec<f32> = q.pixels.iter().copied().collect();
    let anchors_ok = got == [-127.0, 127.0, -127.0, -127.0, 127.0, 127.0];

    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut hu: Vec<f32> = (0..10_000).map(|_| rng.random_range(-2000.0f32..4000.0)).collect();
    hu.sort_by(f32::total_cmp);
    let levels: Vec<f32> = threshold_and_quantize(&hu_image(hu)).pixels.iter().copied().collect();
    let monotone = levels.windows(2).all(|w| w[0] <= w[1]);
    let in_range = levels.iter().all(|v| (-127.0..=127.0).contains(v) && v.fract() == 0.0);
    check(
        anchors_ok && monotone && in_range,
        format!("anchors {got:?}; monotone on 10000 sorted HU values: {monotone}; integral in [-127, 127]: {in_range}"),
    )
}

fn target_map_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut worst_peak, mut worst_sym, mut worst_closed) = (0.0f64, 0.0f64, 0.0f64);
    let mut argmax_failures = 0;
    for _ in 0..200 {
        let h = rng.random_range(16..400usize);
        let w = rng.random_range(8..300usize);
        let y = rng.random_range(0..h);
        let sigma = rng.random_range(0.5..12.0);
        let v = rng.random_range(0..60) as f64;
        let x0 = (w / 2) as f64;
        let m2 = make_confidence_map_2d(h, w, y, sigma, v, x0).map_err(|e| e.to_string())?.values;
        let m1 = make_confidence_map_1d(h, y, sigma).map_err(|e| e.to_string())?.values;

        let peak2 = m2.iter().fold(f32::MIN, |a, &b| a.max(b)) as f64;
        let peak1 = m1.iter().fold(f32::MIN, |a, &b| a.max(b)) as f64;
        worst_peak = worst_peak.max((peak2 - 1.0).abs()).max((peak1 - 1.0).abs());

        let mut best = (0usize, f32::MIN);
        for ((r, _), &val) in m2.indexed_iter() {
            if val > best.1 {
                best = (r, val);
            }
        }
        let best1 = (0..h).fold(0, |b, r| if m1[r] > m1[b] { r } else { b });
        if best.0 != y || best1 != y {
            argmax_failures += 1;
        }

        for k in 1..h {
            if y < k || y + k >= h {
                break;
            }
            for c in 0..w {
                worst_sym = worst_sym.max((m2[[y - k, c]] - m2[[y + k, c]]).abs() as f64);
            }
            worst_sym = worst_sym.max((m1[y - k] - m1[y + k]).abs() as f64);
        }

        let g = make_confidence_map_2d(h, w, y, sigma, 0.0, x0).map_err(|e| e.to_string())?.values;
        for ((r, c), &val) in g.indexed_iter() {
            let d2 = (r as f64 - y as f64).powi(2) + (c as f64 - x0).powi(2);
            worst_closed = worst_closed.max((val as f64 - (-d2 / (2.0 * sigma * sigma)).exp()).abs());
        }
    }
    check(
        worst_peak <= 1e-6 && argmax_failures == 0 && worst_sym <= 1e-6 && worst_closed <= 1e-6,
        format!(
            "200 maps: max |peak-1| {worst_peak:.1e}, argmax misses {argmax_failures}, max asymmetry {worst_sym:.1e}, \
             max closed-form deviation (v=0) {worst_closed:.1e}; tolerance 1e-6"
        ),
    )
}

fn finite_difference_error(variant: Variant, seed: u64) -> Result<f64, String> {
    let cfg = ModelConfig { depth: 2, base_channels: 4, ..ModelConfig::new(variant) };
    let mut model = Model::build(cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Array4::from_shape_fn((2, 1, 16, 16), |_| rng.random_range(-1.0f32..1.0));
    let tw = if variant == Variant::L3unet2d { 16 } else { 1 };
    let t = Array4::from_shape_fn((2, 1, 16, tw), |_| rng.random::<f32>());
    let net = model.layer_mut();
    let out = net.forward(&x, &mut TrainContext::deterministic());
    net.backward(&loss_l2_grad(&out, &t).map_err(|e| e.to_string())?);
    let mut analytic = Vec::new();
    net.visit_params(&mut |p| analytic.push(p.grad.clone()));
    net.clear_cache();

    let eps = 1e-3f32;
    let loss_with = |pi: usize, k: usize, delta: f32, net: &mut dyn Layer| -> f64 {
        let mut at = 0;
        net.visit_params(&mut |p| {
            if at == pi {
                p.value[k] += delta;
            }
            at += 1;
        });
        let out = net.forward(&x, &mut TrainContext::deterministic());
        net.clear_cache();
        let mut sum = 0.0f64;
        for (a, b) in out.iter().zip(t.iter()) {
            sum += ((a - b) as f64).powi(2);
        }
        sum / x.dim().0 as f64
    };
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (pi, g) in analytic.iter().enumerate() {
        for _ in 0..3 {
            let k = rng.random_range(0..g.len());
            let up = loss_with(pi, k, eps, net);
            let down = loss_with(pi, k, -2.0 * eps, net);
            loss_with(pi, k, eps, net);
            let fd = (up - down) / (2.0 * eps as f64);
            diff += (fd - g[k] as f64).powi(2);
            norm += (fd.abs() + (g[k] as f64).abs()).powi(2);
        }
    }
    Ok(diff.sqrt() / norm.sqrt().max(1e-12))
}

fn loss_and_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, h, w) = (rng.random_range(1..5), rng.random_range(1..40), rng.random_range(1..20));
        let p = Array4::from_shape_fn((n, 1, h, w), |_| rng.random::<f32>());
        let t = Array4::from_shape_fn((n, 1, h, w), |_| rng.random::<f32>());
        let mut oracle = 0.0f64;
        for b in 0..n {
            for r in 0..h {
                for c in 0..w {
                    let d = p[[b, 0, r, c]] as f64 - t[[b, 0, r, c]] as f64;
                    oracle += d * d;
                }
            }
        }
        oracle /= n as f64;
        let got = loss_l2(&p, &t).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs() / oracle.max(1.0));
    }
    let fd2 = finite_difference_error(Variant::L3unet2d, 11)?;
    let fd1 = finite_difference_error(Variant::L3unet1d, 12)?;
    check(
        worst <= 1e-6 && fd2 < 1e-2 && fd1 < 1e-2,
        format!("loss vs scalar loop: max rel deviation {worst:.1e} (tol 1e-6); FD relative error 2D {fd2:.2e}, 1D {fd1:.2e} (tol 1e-2)"),
    )
}

fn shape_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let m2 = Model::build(ModelConfig::new(Variant::L3unet2d), 1).map_err(|e| e.to_string())?;
    let m1 = Model::build(ModelConfig::new(Variant::L3unet1d), 2).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    let mut ok = true;
    for _ in 0..3 {
        let h = 64 * rng.random_range(1..=5);
        let w = 64 * rng.random_range(1..=4);
        let x = Array4::from_shape_fn((1, 1, h, w), |_| rng.random_range(-127.0f32..127.0));
        let o2 = m2.infer(&x).map_err(|e| e.to_string())?.dim();
        let o1 = m1.infer(&x).map_err(|e| e.to_string())?.dim();
        ok &= o2 == (1, 1, h, w) && o1 == (1, 1, h, 1);
        details.push(format!("{h}x{w} -> 2D {}x{}x{}, 1D {}", o2.1, o2.2, o2.3, o1.2));
    }
    check(ok, details.join("; "))
}

fn parameter_budget() -> Outcome {
    let c2 = Model::build(ModelConfig::new(Variant::L3unet2d), 0).map_err(|e| e.to_string())?.parameter_count();
    let c1 = Model::build(ModelConfig::new(Variant::L3unet1d), 0).map_err(|e| e.to_string())?.parameter_count();
    let (r2, r1) = (c2 as f64 / 8_493_537.0 - 1.0, c1 as f64 / 6_189_025.0 - 1.0);
    check(
        r2.abs() <= 0.25 && r1.abs() <= 0.25 && c1 < c2,
        format!("2D {c2} ({:+.1}% of 8493537), 1D {c1} ({:+.1}% of 6189025); tolerance 25%", r2 * 100.0, r1 * 100.0),
    )
}

fn phantom_samples(n: usize, seed: u64) -> Result<Vec<Sample>, String> {
    Ok(generate_dataset(n, &PhantomConfig::default(), seed)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| Sample { id: s.id, y_mm: s.phantom.y_true_mm, image: s.phantom.frontal })
        .collect())
}

/// Crops nearly as tall as the tallest phantom keep the sacrum in view, so
/// the network can count vertebrae upward from it.
fn phantom_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(Variant::L3unet1d);
    cfg.model.base_channels = 8;
    cfg.crop_h = 384;
    cfg.crop_w = 128;
    cfg.batch_size = 4;
    cfg.epochs = 50;
    cfg.seed = 0;
    cfg
}

fn phantom_end_to_end() -> Outcome {
    let train_set = phantom_samples(200, 1)?;
    let held_out = phantom_samples(50, 2)?;
    let cfg = phantom_train_config();
    let start = Instant::now();
    let mut model = Model::build(cfg.model.clone(), cfg.seed).map_err(|e| e.to_string())?;
    let history = train(&mut model, &train_set, &cfg, None).map_err(|e| e.to_string())?;
    let mut errors = Vec::new();
    for s in &held_out {
        let p = predict(&model, &s.image).map_err(|e| e.to_string())?;
        errors.push((p.y_mm - s.y_mm).abs());
    }
    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    let median = if n % 2 == 1 { errors[n / 2] } else { (errors[n / 2 - 1] + errors[n / 2]) / 2.0 };
    let outliers = errors.iter().filter(|e| **e > 10.0).count();
    let frac = outliers as f64 / n as f64;
    check(
        median <= 2.0 && frac <= 0.10 && history.epochs.len() <= 50,
        format!(
            "{} epochs on 200 phantoms in {:.0} s; 50 held-out: median |error| {median:.1} mm (limit 2), \
             {outliers} outliers > 10 mm = {:.0}% (limit 10%)",
            history.epochs.len(),
            start.elapsed().as_secs_f64(),
            frac * 100.0
        ),
    )
}

fn sigma_annealing() -> Outcome {
    let first = sigma_schedule(0, 50, 10.0, 1.5).map_err(|e| e.to_string())?;
    let last = sigma_schedule(49, 50, 10.0, 1.5).map_err(|e| e.to_string())?;
    let mid = sigma_schedule(24, 50, 10.0, 1.5).map_err(|e| e.to_string())?;

    let mut cfg = TrainConfig::for_variant(Variant::L3unet1d);
    cfg.model.depth = 2;
    cfg.model.base_channels = 2;
    cfg.crop_h = 64;
    cfg.crop_w = 64;
    cfg.batch_size = 2;
    cfg.batches_per_epoch = Some(1);
    cfg.epochs = 50;
    let data: Vec<Sample> = phantom_samples(4, 3)?;
    let mut model = Model::build(cfg.model.clone(), 0).map_err(|e| e.to_string())?;
    let history = train(&mut model, &data, &cfg, None).map_err(|e| e.to_string())?;
    let used: Vec<f64> = history.epochs.iter().map(|e| e.sigma).collect();
    let linear = used.iter().enumerate().all(|(i, s)| (s - (10.0 - 8.5 * i as f64 / 49.0)).abs() < 1e-9);
    check(
        first == 10.0 && last == 1.5 && (mid - 5.837).abs() < 1e-3 && used.len() == 50 && used[0] == 10.0 && used[49] == 1.5 && linear,
        format!("schedule: epoch 0 -> {first}, epoch 49 -> {last}, epoch 24 -> {mid:.3}; training history over {} epochs runs {} -> {}, linear: {linear}", used.len(), used[0], used[used.len() - 1]),
    )
}

fn efficiency() -> Outcome {
    let cfg = PhantomConfig { fov_height: [440, 440], width: 512, ..PhantomConfig::default() };
    let img = generate_phantom(&cfg, &mut sample_rng(9, 0)).map_err(|e| e.to_string())?.frontal;
    let unet = Model::build(ModelConfig::new(Variant::L3unet1d), 1).map_err(|e| e.to_string())?;
    let baseline_cfg = ModelConfig { base_channels: 8, dense_units: 256, ..ModelConfig::new(Variant::BaselineRegressionDual) };
    let baseline = Model::build(baseline_cfg, 2).map_err(|e| e.to_string())?;
    let t_unet = time_median(2, 10, || predict(&unet, &img)).map_err(|e| e.to_string())?;
    let t_base = time_median(2, 10, || sliding_window_predict(&baseline, &img, 1)).map_err(|e| e.to_string())?;
    let ratio = t_base / t_unet;
    check(
        img.height() == 440 && ratio >= 10.0,
        format!(
            "{}x{} image, median of 10: L3UNet-1D (full size) {t_unet:.3} s, stride-1 sliding window (reduced baseline) {t_base:.3} s, ratio {ratio:.1} (limit 10)",
            img.height(),
            img.width()
        ),
    )
}

fn eval_arithmetic() -> Outcome {
    let mut failures = Vec::new();
    let s = localization_errors(&[1.0, 1.0, 1.0, 12.0], &[0.0; 4], &[1.0; 4]).map_err(|e| e.to_string())?;
    if !(s.median_mm == 1.0 && s.max_mm == 12.0 && s.count_gt_10 == 1 && s.mean_mm == 3.75 && s.std_mm == 22.6875f64.sqrt()) {
        failures.push(format!("{{1,1,1,12}} gave {s:?}"));
    }
    let s = localization_errors(&[105.0], &[100.0], &[2.5]).map_err(|e| e.to_string())?;
    if s.mean_slice != 2.0 {
        failures.push(format!("5 mm at 2.5 mm slices gave {} slices", s.mean_slice));
    }
    let s = localization_errors(&[100.0, 107.0], &[101.0, 100.0], &[3.0, 3.0]).map_err(|e| e.to_string())?;
    if s.max_slice != 7.0 / 3.0 || s.mean_slice != (1.0 / 3.0 + 7.0 / 3.0) / 2.0 {
        failures.push(format!("unrounded slice errors wrong: {s:?}"));
    }
    let map = |v: f64| BTreeMap::from([("x".to_string(), v)]);
    let th = map(1.0);
    let r = interrater_stats(&map(100.0), &map(102.0), &th).map_err(|e| e.to_string())?;
    if !(r.a_vs_b.mean_mm == 2.0 && r.each_vs_mean.mean_mm == 1.0 && r.each_vs_mean.max_mm == 1.0) {
        failures.push(format!("A=100, B=102 gave {r:?}"));
    }
    let r = interrater_stats(&map(100.0), &map(101.0), &th).map_err(|e| e.to_string())?;
    if !(r.a_vs_b.max_mm == 1.0 && r.each_vs_mean.n == 2 && r.each_vs_mean.max_mm == 1.0 && r.each_vs_mean.mean_mm == 0.5) {
        failures.push(format!("floor-mean merge for A=100, B=101 gave {r:?}"));
    }
    check(failures.is_empty(), if failures.is_empty() { "all hand-computed fixtures reproduced exactly".into() } else { failures.join("; ") })
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mipslice"))
        .args(args)
        .env_remove("MIPSLICE_CACHE")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`mipslice {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn chain(dir: &Path) -> Result<(BTreeMap<String, serde_json::Value>, String), String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    std::fs::write(
        dir.join("train.toml"),
        "epochs = 2\nbatch_size = 4\ncrop_h = 128\ncrop_w = 128\n[model]\nbase_channels = 4\n",
    )
    .map_err(|e| e.to_string())?;
    run_cli(&["--seed", "5", "gen-phantoms", "-n", "12", "-o", &p("raw"), "--volumes"])?;
    run_cli(&["--seed", "5", "preprocess", &p("raw/volumes"), "-o", &p("data"), "--ann", &p("raw/annotations.csv")])?;
    run_cli(&["--seed", "5", "train", "--variant", "l3unet1d", "--config", &p("train.toml"), "--data", &p("data"), "-o", &p("run")])?;
    run_cli(&["--seed", "5", "predict", "--model", &p("run/best.json"), "--input", &p("data"), "-o", &p("pred")])?;
    run_cli(&["--seed", "5", "evaluate", "--pred", &p("pred"), "--ann", &p("data/annotations.csv"), "--mips", &p("data/mips")])?;
    let mut preds = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("pred")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            v.as_object_mut().ok_or("prediction is not an object")?.remove("elapsed_s");
            preds.insert(path.file_name().unwrap().to_string_lossy().into_owned(), v);
        }
    }
    let history = std::fs::read_to_string(dir.join("run/history.csv")).map_err(|e| e.to_string())?;
    Ok((preds, history))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, ha) = chain(a.path())?;
    let (pb, hb) = chain(b.path())?;
    check(
        !pa.is_empty() && pa == pb && ha == hb,
        format!(
            "gen-phantoms -> preprocess -> train -> predict -> evaluate twice with seed 5: {} prediction JSONs {}, history CSVs {}",
            pa.len(),
            if pa == pb { "identical (elapsed_s excluded)" } else { "differ" },
            if ha == hb { "identical" } else { "differ" }
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("mip oracle equivalence", mip_oracle_equivalence),
        ("quantization endpoints", quantization_endpoints),
        ("target-map contract", target_map_contract),
        ("loss and gradients", loss_and_gradients),
        ("shape contracts", shape_contracts),
        ("parameter budget", parameter_budget),
        ("phantom end-to-end", phantom_end_to_end),
        ("sigma annealing", sigma_annealing),
        ("efficiency", efficiency),
        ("eval arithmetic", eval_arithmetic),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
