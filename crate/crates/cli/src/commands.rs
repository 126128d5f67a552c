use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use mipslice_core::eval::{benchmark, localization_errors, stats_csv, stats_table, timing_table, ErrorStats, OUTLIER_MM};
use mipslice_core::inference::{predict_any, save_overlay, PredictionResult};
use mipslice_core::mip::{load_mip, read_sidecar, save_mip, MipImage, View};
use mipslice_core::models::{load_checkpoint, Model};
use mipslice_core::phantom::{generate_dataset, generate_phantom, sample_rng, write_dataset, write_volume_dataset, PhantomConfig};
use mipslice_core::targets::{merge_annotations, read_annotations, GroundTruth};
use mipslice_core::training::{load_dataset, train, TrainConfig, TrainOutputs};
use mipslice_core::volume_io::slice_index_for_y;
use mipslice_server::{serve, ServeConfig};

use crate::cache::volume_and_mips;
use crate::{
    BenchmarkArgs, Cli, Command, EvaluateArgs, GenPhantomsArgs, PredictArgs, PreprocessArgs, ServeArgs, TrainArgs,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::GenPhantoms(a) => gen_phantoms(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark_cmd(a, cli.seed),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_ground_truth(path: &Path) -> Result<BTreeMap<String, GroundTruth>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(merge_annotations(&read_annotations(file).with_context(|| format!("parsing {}", path.display()))?))
}

fn is_volume(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz") || (name.ends_with(".json") && path.with_extension("raw").is_file())
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn expand_volumes(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let found: Vec<_> = sorted_entries(p)?.into_iter().filter(|f| is_volume(f)).collect();
            ensure!(!found.is_empty(), "no volumes found in {}", p.display());
            out.extend(found);
        } else {
            ensure!(p.is_file(), "no such file: {}", p.display());
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let volumes = expand_volumes(&a.volumes)?;
    let mips = a.output.join("mips");
    let mut seen = BTreeSet::new();
    for path in &volumes {
        let (vol, frontal, sagittal) = volume_and_mips(path)?;
        ensure!(seen.insert(vol.id().to_string()), "duplicate volume id {:?} ({})", vol.id(), path.display());
        save_mip(&frontal, &mips)?;
        save_mip(&sagittal, &mips)?;
        log::info!("{} -> {}x{} mm", path.display(), frontal.height(), frontal.width());
    }
    if let Some(ann) = &a.ann {
        read_ground_truth(ann)?;
        let dest = a.output.join("annotations.csv");
        fs::copy(ann, &dest).with_context(|| format!("copying {} to {}", ann.display(), dest.display()))?;
    }
    println!("wrote {} MIP pairs to {}", volumes.len(), mips.display());
    Ok(())
}

fn gen_phantoms(a: &GenPhantomsArgs, seed: u64) -> Result<()> {
    ensure!(a.count > 0, "-n must be at least 1");
    let mut cfg = PhantomConfig { seed, ..PhantomConfig::default() };
    if let Some(path) = &a.config {
        let mut base = toml::Table::try_from(&cfg)?;
        let over: toml::Table = read_text(path)?.parse().with_context(|| format!("parsing {}", path.display()))?;
        base.extend(over);
        cfg = base.try_into().with_context(|| format!("invalid phantom config {}", path.display()))?;
    }
    cfg.validate()?;
    if a.volumes {
        let paths = write_volume_dataset(a.count, &cfg, cfg.seed, &a.output)?;
        println!("wrote {} phantom volumes to {}", paths.len(), a.output.join("volumes").display());
    } else {
        let samples = generate_dataset(a.count, &cfg, cfg.seed)?;
        write_dataset(&samples, &a.output)?;
        println!("wrote {} phantom MIP pairs to {}", samples.len(), a.output.join("mips").display());
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let mut cfg = TrainConfig::for_variant(a.variant);
    cfg.seed = seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.view {
        cfg.view = v;
    }
    if let Some(path) = &a.config {
        cfg = cfg.overlay_toml(&read_text(path)?).with_context(|| format!("in {}", path.display()))?;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data, cfg.view).with_context(|| format!("loading dataset {}", a.data.display()))?;
    ensure!(data.len() >= 2, "need at least 2 labelled images, found {}", data.len());
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    log::info!("{} with {} parameters on {} images", cfg.model.variant, model.parameter_count(), data.len());
    let outputs = TrainOutputs { dir: a.output.clone() };
    let history = train(&mut model, &data, &cfg, Some(&outputs))?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "best epoch {} of {}: validation median {:.2} mm, mean {:.2} mm; checkpoint {}",
        best.epoch + 1,
        history.epochs.len(),
        best.val_median_mm,
        best.val_mean_mm,
        outputs.best_checkpoint().display()
    );
    Ok(())
}

enum Input {
    Volume(PathBuf),
    Mip(PathBuf),
}

fn expand_predict_inputs(inputs: &[PathBuf], view: View) -> Result<Vec<Input>> {
    let suffix = format!("_{view}.png");
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let dir = if p.join("mips").is_dir() { p.join("mips") } else { p.clone() };
            let before = out.len();
            for f in sorted_entries(&dir)? {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                if name.ends_with(&suffix) {
                    out.push(Input::Mip(f));
                } else if is_volume(&f) {
                    out.push(Input::Volume(f));
                }
            }
            ensure!(out.len() > before, "no {view} MIPs or volumes found in {}", dir.display());
        } else if is_png(p) {
            out.push(Input::Mip(p.clone()));
        } else if is_volume(p) {
            out.push(Input::Volume(p.clone()));
        } else {
            bail!("{}: expected a volume, a MIP PNG or a directory", p.display());
        }
    }
    Ok(out)
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    ensure!(a.stride >= 1, "--stride must be at least 1");
    let (model, _) = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let gt = a.ann.as_deref().map(read_ground_truth).transpose()?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut seen = BTreeSet::new();
    for input in expand_predict_inputs(&a.input, a.view)? {
        let (img, result): (MipImage, PredictionResult) = match input {
            Input::Mip(path) => {
                let img = load_mip(&path).with_context(|| format!("loading {}", path.display()))?;
                let result = predict_any(&model, &img, a.stride)?;
                (img, result)
            }
            Input::Volume(path) => {
                let (vol, frontal, sagittal) = volume_and_mips(&path)?;
                let img = if a.view == View::Frontal { frontal } else { sagittal };
                let mut result = predict_any(&model, &img, a.stride)?;
                result.slice_index = Some(slice_index_for_y(&vol, result.y_mm)?);
                (img, result)
            }
        };
        ensure!(seen.insert(result.image_id.clone()), "duplicate image id {:?} among inputs", result.image_id);
        let json = a.output.join(format!("{}.json", result.image_id));
        fs::write(&json, serde_json::to_string_pretty(&result)? + "\n")
            .with_context(|| format!("writing {}", json.display()))?;
        if !a.no_overlay {
            let truth = gt.as_ref().and_then(|g| g.get(&result.image_id)).map(|g| g.y_mm);
            save_overlay(a.output.join(format!("{}.png", result.image_id)), &img, &result, truth)?;
        }
        println!(
            "{}: y = {} mm{}, confidence {:.3}{}",
            result.image_id,
            result.y_mm,
            result.slice_index.map(|s| format!(" (slice {s})")).unwrap_or_default(),
            result.confidence,
            if result.low_confidence { " [low confidence]" } else { "" }
        );
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    ensure!(a.default_thickness > 0.0, "--default-thickness must be positive");
    let gt = read_ground_truth(&a.ann)?;
    let mut groups: BTreeMap<String, Vec<(PredictionResult, f64, f64)>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for path in sorted_entries(&a.pred)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let pred: PredictionResult = serde_json::from_str(&read_text(&path)?)
            .with_context(|| format!("{} is not a prediction file", path.display()))?;
        let Some(truth) = gt.get(&pred.image_id) else {
            unmatched.push(pred.image_id);
            continue;
        };
        if truth.ambiguous {
            continue;
        }
        let thickness = match &a.mips {
            Some(dir) => read_sidecar(dir.join(format!("{}_{}.png", pred.image_id, pred.view)))
                .ok()
                .and_then(|s| s.original_slice_thickness_mm)
                .unwrap_or(a.default_thickness),
            None => a.default_thickness,
        };
        groups.entry(format!("{}/{}", pred.variant, pred.view)).or_default().push((pred, truth.y_mm, thickness));
    }
    if !unmatched.is_empty() {
        log::warn!("{} predictions have no annotation: {}", unmatched.len(), unmatched.join(", "));
    }
    ensure!(!groups.is_empty(), "no predictions in {} match an unambiguous annotation", a.pred.display());
    let mut rows: Vec<(String, ErrorStats)> = Vec::new();
    let mut outliers = Vec::new();
    for (name, items) in &groups {
        let preds: Vec<f64> = items.iter().map(|(p, _, _)| p.y_mm).collect();
        let gts: Vec<f64> = items.iter().map(|(_, g, _)| *g).collect();
        let th: Vec<f64> = items.iter().map(|(_, _, t)| *t).collect();
        rows.push((name.clone(), localization_errors(&preds, &gts, &th)?));
        for (p, g, _) in items {
            if (p.y_mm - g).abs() > OUTLIER_MM {
                outliers.push(format!(
                    "  {name} {}: predicted {} mm, annotated {g} mm, confidence {:.3}",
                    p.image_id, p.y_mm, p.confidence
                ));
            }
        }
    }
    print!("{}", stats_table(&rows));
    if !outliers.is_empty() {
        println!("outliers (> {OUTLIER_MM} mm):");
        for line in outliers {
            println!("{line}");
        }
    }
    if let Some(path) = &a.csv {
        fs::write(path, stats_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn benchmark_cmd(a: &BenchmarkArgs, seed: u64) -> Result<()> {
    ensure!(a.runs >= 1 && a.stride >= 1, "--runs and --stride must be at least 1");
    let img = match &a.input {
        Some(p) => load_mip(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let cfg = PhantomConfig {
                fov_height: [a.height, a.height],
                width: a.width,
                fov_below_sacrum: [15.0, (a.height as f64 / 4.0).max(15.0)],
                ..PhantomConfig::default()
            };
            generate_phantom(&cfg, &mut sample_rng(seed, 0))?.frontal
        }
    };
    let mut models = Vec::new();
    for path in &a.models {
        let (model, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        models.push((format!("{stem} ({})", model.variant()), model));
    }
    let entries = models
        .iter()
        .map(|(name, model)| {
            let img = &img;
            let stride = a.stride;
            let f: Box<dyn FnMut() -> mipslice_core::Result<()> + '_> =
                Box::new(move || predict_any(model, img, stride).map(|_| ()));
            (name.clone(), f)
        })
        .collect();
    let rows = benchmark(entries, a.runs)?;
    println!("image {}x{} px, stride {}, median of {} runs", img.height(), img.width(), a.stride, a.runs);
    print!("{}", timing_table(&rows));
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let cfg = ServeConfig {
        data_dir: a.data.clone(),
        addr: (a.host, a.port).into(),
        cors_origin: a.cors_origin.clone(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(cfg)).map_err(|e| anyhow!(e))
}
