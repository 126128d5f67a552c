//! Training: random crops, augmentation, sigma-annealed targets, L2 loss and
//! Adam, with best-checkpoint selection on a held-out split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mipslice_nn::{sigmoid, Adam, Tensor, TrainContext};
use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{mean, median};
use crate::inference::predict_any;
use crate::mip::{load_mip, MipImage, View, INT8_FLOOR};
use crate::models::{save_checkpoint, Model, ModelConfig, Variant, BASELINE_CROP};
use crate::targets::{make_confidence_map_1d, make_confidence_map_2d_default, merge_annotations, read_annotations, sigma_schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub crop_h: usize,
    pub crop_w: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub validation_fraction: f64,
    /// Batches per epoch; defaults to one pass over the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches_per_epoch: Option<usize>,
    pub view: View,
    /// Window stride used when validating sliding-window baselines.
    pub val_stride: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (crop_h, crop_w, batch_size, lr) = match variant {
            Variant::L3unet2d => (256, 384, 5, 1e-3),
            Variant::L3unet1d => (256, 384, 8, 1e-3),
            Variant::BaselineRegression | Variant::BaselineRegressionDual => (BASELINE_CROP.0, BASELINE_CROP.1, 12, 1e-5),
        };
        Self {
            model: ModelConfig::new(variant),
            crop_h,
            crop_w,
            batch_size,
            epochs: 50,
            lr,
            sigma_start: crate::targets::SIGMA_START,
            sigma_end: crate::targets::SIGMA_END,
            validation_fraction: 0.1,
            batches_per_epoch: None,
            view: View::Frontal,
            val_stride: 5,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Parse a TOML experiment file on top of the defaults for its variant.
    /// The variant comes from `[model] variant` or, failing that, `variant`.
    pub fn from_toml(text: &str, variant: Option<Variant>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let from_file = table
            .get("model")
            .and_then(|m| m.get("variant"))
            .and_then(|v| v.as_str())
            .map(str::parse::<Variant>)
            .transpose()?;
        let variant = from_file
            .or(variant)
            .ok_or_else(|| Error::Config("no model variant given (set [model] variant or pass one)".into()))?;
        Self::for_variant(variant).overlay_table(table)
    }

    /// Apply the keys of a TOML experiment file on top of `self`. The file
    /// may name a variant only if it matches the current one.
    pub fn overlay_toml(self, text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        self.overlay_table(table)
    }

    fn overlay_table(self, table: toml::Table) -> Result<Self> {
        let variant = self.model.variant;
        if let Some(named) = table.get("model").and_then(|m| m.get("variant")).and_then(|v| v.as_str()) {
            if named.parse::<Variant>()? != variant {
                return Err(Error::Config(format!("config names variant {named:?} but {variant} was requested")));
            }
        }
        let mut base = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge_toml(&mut base, toml::Value::Table(table));
        if let Some(model) = base.get_mut("model").and_then(|m| m.as_table_mut()) {
            model.insert("variant".into(), toml::Value::String(serde_variant_name(variant)));
        }
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.model.variant.is_unet() {
            let f = self.model.total_factor();
            if !self.crop_h.is_multiple_of(f) || !self.crop_w.is_multiple_of(f) || self.crop_h == 0 || self.crop_w == 0 {
                return Err(Error::Config(format!(
                    "crop {}x{} must be divisible by the model's downsampling factor {f}",
                    self.crop_h, self.crop_w
                )));
            }
        } else if (self.crop_h, self.crop_w) != BASELINE_CROP {
            return Err(Error::Config(format!("baseline crops must be {}x{}", BASELINE_CROP.0, BASELINE_CROP.1)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.sigma_start > 0.0 && self.sigma_end > 0.0) {
            return Err(Error::Config("sigma endpoints must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.val_stride == 0 || self.batches_per_epoch == Some(0) {
            return Err(Error::Config("val_stride and batches_per_epoch must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn serde_variant_name(v: Variant) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).expect("variant serializes")
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge_toml(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// A training image with its merged label in millimetres (1 px = 1 mm).
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: MipImage,
    pub y_mm: f64,
}

/// Load `<root>/mips/<id>_<view>.png` for every non-ambiguous image in
/// `<root>/annotations.csv`, in id order.
pub fn load_dataset(root: impl AsRef<Path>, view: View) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let csv_path = root.join("annotations.csv");
    let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let merged = merge_annotations(&read_annotations(file)?);
    let mut out = Vec::with_capacity(merged.len());
    for (id, gt) in merged {
        if gt.ambiguous {
            continue;
        }
        let image = load_mip(root.join("mips").join(format!("{id}_{view}.png")))?;
        if gt.y_mm >= image.height_mm() {
            return Err(Error::Domain(format!("{id}: label {} mm beyond image height {}", gt.y_mm, image.height_mm())));
        }
        out.push(Sample { id, image, y_mm: gt.y_mm });
    }
    Ok(out)
}

/// A training window and the label row inside it, if the label is in view.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Array2<f32>,
    pub offset: usize,
    pub y_local: Option<usize>,
}

/// Pad to at least `(crop_h, crop_w)` with the intensity floor: rows are
/// added at the end, columns evenly on both sides.
fn pad_for_crop(px: &Array2<f32>, crop_h: usize, crop_w: usize) -> Array2<f32> {
    let (h, w) = px.dim();
    if h >= crop_h && w >= crop_w {
        return px.clone();
    }
    let (oh, ow) = (h.max(crop_h), w.max(crop_w));
    let left = (ow - w) / 2;
    let mut out = Array2::from_elem((oh, ow), INT8_FLOOR);
    out.slice_mut(s![..h, left..left + w]).assign(px);
    out
}

fn crop_at(px: &Array2<f32>, y: f64, offset: usize, crop_h: usize, crop_w: usize) -> Crop {
    let left = (px.ncols() - crop_w) / 2;
    let local = y.round() - offset as f64;
    Crop {
        pixels: px.slice(s![offset..offset + crop_h, left..left + crop_w]).to_owned(),
        offset,
        y_local: (local >= 0.0 && local < crop_h as f64).then_some(local as usize),
    }
}

/// Window with a uniformly random vertical offset, centred horizontally.
pub fn sample_crop(img: &MipImage, y_true: f64, crop_h: usize, crop_w: usize, rng: &mut impl Rng) -> Result<Crop> {
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Shape("crop dimensions must be positive".into()));
    }
    let px = pad_for_crop(&img.pixels, crop_h, crop_w);
    let offset = rng.random_range(0..=px.nrows() - crop_h);
    Ok(crop_at(&px, y_true, offset, crop_h, crop_w))
}

/// Like [`sample_crop`] but restricted to offsets that keep the label in view.
pub fn sample_positive_crop(img: &MipImage, y_true: f64, crop_h: usize, crop_w: usize, rng: &mut impl Rng) -> Result<Crop> {
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Shape("crop dimensions must be positive".into()));
    }
    let px = pad_for_crop(&img.pixels, crop_h, crop_w);
    let y = y_true.round().max(0.0) as usize;
    let lo = (y + 1).saturating_sub(crop_h);
    let hi = y.min(px.nrows() - crop_h);
    if lo > hi {
        return Err(Error::Domain(format!("label row {y} outside the image")));
    }
    Ok(crop_at(&px, y_true, rng.random_range(lo..=hi), crop_h, crop_w))
}

/// Mean over the batch of the per-sample sum of squared differences.
pub fn loss_l2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.dim().0.max(1) as f64;
    Ok(pred.iter().zip(target.iter()).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum::<f64>() / n)
}

/// Gradient of [`loss_l2`] with respect to `pred`.
pub fn loss_l2_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let scale = 2.0 / pred.dim().0.max(1) as f32;
    Ok((pred - target) * scale)
}

/// Baseline loss: squared error on `y_local / crop_h` over positive crops,
/// plus (dual only) binary cross-entropy on the presence logit. Both terms
/// are averaged over the batch. Returns the loss and the output gradient.
pub fn baseline_loss(out: &Tensor, y_local: &[Option<usize>], crop_h: usize, dual: bool) -> (f64, Tensor) {
    let n = out.dim().0;
    let mut grad = Tensor::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (i, y) in y_local.iter().enumerate() {
        if let Some(y) = y {
            let d = out[[i, 0, 0, 0]] as f64 - *y as f64 / crop_h as f64;
            loss += d * d / n as f64;
            grad[[i, 0, 0, 0]] = (2.0 * d / n as f64) as f32;
        }
        if dual {
            let z = out[[i, 1, 0, 0]];
            let label = if y.is_some() { 1.0 } else { 0.0 };
            // stable log(1 + e^-|z|) form of the cross-entropy
            let zf = z as f64;
            loss += (zf.max(0.0) - zf * label + (-zf.abs()).exp().ln_1p()) / n as f64;
            grad[[i, 1, 0, 0]] = (sigmoid(z) - label as f32) / n as f32;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sigma: f64,
    pub train_loss: f64,
    pub val_mean_mm: f64,
    pub val_median_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sigma,train_loss,val_mean_mm,val_median_mm\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.8},{:.6},{:.6}", r.epoch, r.sigma, r.train_loss, r.val_mean_mm, r.val_median_mm);
        }
        out
    }
}

const SPLIT_SALT: u64 = 0x5eed_0517;

/// Deterministic train/validation split of sample indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n as f64) * fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}


fn build_batch(
    data: &[Sample],
    picks: &[usize],
    cfg: &TrainConfig,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<Option<usize>>)> {
    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let variant = cfg.model.variant;
    let mut x = Array4::<f32>::zeros((picks.len(), 1, ch, cw));
    let target_w = if variant == Variant::L3unet2d { cw } else { 1 };
    let mut t = Array4::<f32>::zeros((picks.len(), 1, ch, target_w));
    let mut labels = Vec::with_capacity(picks.len());
    for (b, &i) in picks.iter().enumerate() {
        let s = &data[i];
        let aug = augment(&s.image, s.y_mm, &cfg.augment, rng)?;
        let crop = if variant == Variant::BaselineRegression {
            sample_positive_crop(&aug.image, aug.y_true, ch, cw, rng)?
        } else {
            sample_crop(&aug.image, aug.y_true, ch, cw, rng)?
        };
        x.slice_mut(s![b, 0, .., ..]).assign(&crop.pixels);
        if let Some(y) = crop.y_local {
            match variant {
                Variant::L3unet2d => {
                    let m = make_confidence_map_2d_default(ch, cw, y, sigma)?;
                    t.slice_mut(s![b, 0, .., ..]).assign(&m.values);
                }
                Variant::L3unet1d => {
                    let m = make_confidence_map_1d(ch, y, sigma)?;
                    t.slice_mut(s![b, 0, .., 0]).assign(&m.values);
                }
                _ => {}
            }
        }
        labels.push(crop.y_local);
    }
    Ok((x, t, labels))
}

/// Median and mean absolute error of whole-image predictions.
pub fn validation_errors(model: &Model, data: &[Sample], idx: &[usize], stride: usize) -> Result<(f64, f64)> {
    let errs = idx
        .iter()
        .map(|&i| predict_any(model, &data[i].image, stride).map(|p| (p.y_mm - data[i].y_mm).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok((mean(&errs), median(&errs)))
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.json")
    }

    pub fn history_csv(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
}

/// Train `model` in place. On return the model holds the weights of the
/// epoch with the lowest validation median error (ties: lower mean, then
/// earlier epoch). With `outputs`, the best checkpoint, the history CSV and
/// the resolved config are written there.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig, outputs: Option<&TrainOutputs>) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.config() != &cfg.model {
        return Err(Error::Config("model was built from a different config than the training config".into()));
    }
    let hash = cfg.hash();
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };
    let batches = cfg.batches_per_epoch.unwrap_or_else(|| train_idx.len().div_ceil(cfg.batch_size));
    let variant = cfg.model.variant;
    let mut adam = Adam::new(cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = TrainContext::new(cfg.seed.wrapping_add(1));
    let mut history = TrainHistory::default();
    let mut best: Option<((f64, f64), Vec<f32>)> = None;
    if let Some(out) = outputs {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let resolved = out.dir.join("config.toml");
        fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    }

    let mut order = train_idx.clone();
    let mut cursor = order.len();
    for epoch in 0..cfg.epochs {
        let sigma = sigma_schedule(epoch, cfg.epochs, cfg.sigma_start, cfg.sigma_end)?;
        let mut loss_sum = 0.0;
        for batch in 0..batches {
            let mut picks = Vec::with_capacity(cfg.batch_size);
            while picks.len() < cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picks.push(order[cursor]);
                cursor += 1;
            }
            let (x, t, labels) = build_batch(data, &picks, cfg, sigma, &mut rng)?;
            let net = model.layer_mut();
            let out = net.forward(&x, &mut ctx);
            let (loss, grad) = if variant.is_unet() {
                (loss_l2(&out, &t)?, loss_l2_grad(&out, &t)?)
            } else {
                baseline_loss(&out, &labels, cfg.crop_h, variant.is_dual())
            };
            if !loss.is_finite() {
                net.clear_cache();
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batch} (sigma {sigma:.3}, lr {}); lower the learning rate",
                    cfg.lr
                )));
            }
            net.backward(&grad);
            adam.step(net);
            net.clear_cache();
            loss_sum += loss;
        }
        let (val_mean, val_median) = validation_errors(model, data, &val_idx, cfg.val_stride)?;
        let record = EpochRecord {
            epoch,
            sigma,
            train_loss: loss_sum / batches as f64,
            val_mean_mm: val_mean,
            val_median_mm: val_median,
        };
        log::info!(
            "epoch {epoch}: sigma {sigma:.2} loss {:.5} val median {val_median:.2} mm mean {val_mean:.2} mm",
            record.train_loss
        );
        history.epochs.push(record);
        let key = (val_median, val_mean);
        if best.as_ref().is_none_or(|(b, _)| key < *b) {
            best = Some((key, model.export_state()));
            history.best_epoch = epoch;
            if let Some(out) = outputs {
                save_checkpoint(model, out.dir.join("best"), &hash, epoch)?;
            }
        }
        if let Some(out) = outputs {
            let path = out.history_csv();
            fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some((_, state)) = best {
        model.import_state(&state)?;
    }
    Ok(history)
}
