//! Whole-image prediction, the sliding-window baseline scan, volume-level
//! slice lookup, overlays and timing.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mip::{preprocess_volume, MipImage, View, INT8_FLOOR};
use crate::models::{Model, Variant, BASELINE_CROP};
use crate::volume_io::{slice_index_for_position, slice_index_for_y, Volume3D};

/// Confidence below which a prediction is flagged for review.
pub const LOW_CONFIDENCE: f64 = 0.5;
/// Distance within which single-output window votes count as agreeing.
const VOTE_RADIUS_MM: f64 = 10.0;
const WINDOW_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub original: (usize, usize),
    pub padded: (usize, usize),
}

fn next_multiple(v: usize, f: usize) -> usize {
    v.div_ceil(f) * f
}

/// Pad bottom/right with the intensity floor up to multiples of `factor`.
pub fn pad_to_divisible(img: &MipImage, factor: usize) -> (MipImage, PadRecord) {
    let factor = factor.max(1);
    let (h, w) = img.pixels.dim();
    let (ph, pw) = (next_multiple(h.max(1), factor), next_multiple(w.max(1), factor));
    let record = PadRecord { original: (h, w), padded: (ph, pw) };
    if (ph, pw) == (h, w) {
        return (img.clone(), record);
    }
    let mut pixels = Array2::from_elem((ph, pw), INT8_FLOOR);
    pixels.slice_mut(s![..h, ..w]).assign(&img.pixels);
    (MipImage { pixels, ..img.clone() }, record)
}

pub fn unpad(img: &MipImage, record: &PadRecord) -> MipImage {
    let (h, w) = record.original;
    MipImage { pixels: img.pixels.slice(s![..h, ..w]).to_owned(), ..img.clone() }
}

/// A network producing a confidence map for a whole (padded) image.
pub trait MapModel: Send + Sync {
    fn variant(&self) -> Variant;
    fn total_factor(&self) -> usize;
    /// `(h, w)` map for 2D variants, `(h, 1)` for 1D variants.
    fn forward_map(&self, img: &Array2<f32>) -> Result<Array2<f32>>;
}

/// Raw output of the baseline for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowOutput {
    /// Row of the slice inside the window, in pixels.
    pub y_local: f64,
    /// Presence probability for dual-output models.
    pub presence: Option<f64>,
}

/// A fixed-window regressor scanned over the image.
pub trait WindowModel: Send + Sync {
    fn variant(&self) -> Variant;
    /// `windows` is `(n, 1, 100, 512)`.
    fn regress(&self, windows: &Array4<f32>) -> Result<Vec<WindowOutput>>;
}

fn to_tensor(img: &Array2<f32>) -> Array4<f32> {
    let (h, w) = img.dim();
    img.to_shape((1, 1, h, w)).expect("contiguous image").to_owned()
}

impl MapModel for Model {
    fn variant(&self) -> Variant {
        Model::variant(self)
    }

    fn total_factor(&self) -> usize {
        self.config().total_factor()
    }

    fn forward_map(&self, img: &Array2<f32>) -> Result<Array2<f32>> {
        if !self.variant().is_unet() {
            return Err(Error::Config(format!("{} is not a confidence-map model", self.variant())));
        }
        let out = self.infer(&to_tensor(img))?;
        Ok(out.index_axis_move(ndarray::Axis(0), 0).index_axis_move(ndarray::Axis(0), 0))
    }
}

impl WindowModel for Model {
    fn variant(&self) -> Variant {
        Model::variant(self)
    }

    fn regress(&self, windows: &Array4<f32>) -> Result<Vec<WindowOutput>> {
        if self.variant().is_unet() {
            return Err(Error::Config(format!("{} is not a window regressor", self.variant())));
        }
        let out = self.infer(windows)?;
        let dual = self.variant().is_dual();
        Ok((0..out.dim().0)
            .map(|i| WindowOutput {
                y_local: out[[i, 0, 0, 0]] as f64 * BASELINE_CROP.0 as f64,
                presence: dual.then(|| mipslice_nn::sigmoid(out[[i, 1, 0, 0]]) as f64),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub image_id: String,
    pub view: View,
    pub variant: Variant,
    pub y_mm: f64,
    pub slice_index: Option<usize>,
    pub confidence: f64,
    pub low_confidence: bool,
    pub elapsed_s: f64,
    /// Confidence map over the original image extent; not serialized.
    #[serde(skip)]
    pub map: Array2<f32>,
}

/// Row of the maximum; ties go to the smallest row, then column.
pub fn argmax_row(map: &Array2<f32>) -> (usize, f32) {
    let mut best = (0usize, f32::NEG_INFINITY);
    for ((r, _), &v) in map.indexed_iter() {
        if v > best.1 {
            best = (r, v);
        }
    }
    best
}

fn slice_from_thickness(img: &MipImage, y_mm: f64) -> Option<usize> {
    let t = img.slice_thickness_mm.filter(|t| *t > 0.0)?;
    let slices = ((img.height_mm() / t).round() as usize).max(1);
    slice_index_for_position(y_mm, t, slices).ok()
}

/// Pad, run the model, crop the map back and take its peak.
pub fn predict(model: &dyn MapModel, img: &MipImage) -> Result<PredictionResult> {
    if !model.variant().is_unet() {
        return Err(Error::Config(format!("{} needs sliding_window_predict", model.variant())));
    }
    let start = Instant::now();
    let (padded, record) = pad_to_divisible(img, model.total_factor());
    let full = model.forward_map(&padded.pixels)?;
    let (h, w) = record.original;
    let map = if full.ncols() == 1 { full.slice(s![..h, ..]).to_owned() } else { full.slice(s![..h, ..w]).to_owned() };
    let (row, peak) = argmax_row(&map);
    let y_mm = row as f64 * img.spacing[0];
    let confidence = peak as f64;
    Ok(PredictionResult {
        image_id: img.source_id.clone(),
        view: img.view,
        variant: model.variant(),
        y_mm,
        slice_index: slice_from_thickness(img, y_mm),
        confidence,
        low_confidence: confidence < LOW_CONFIDENCE,
        elapsed_s: start.elapsed().as_secs_f64(),
        map,
    })
}

/// Fit the image to the baseline window width (centred) and to at least the
/// window height (padding at the top rows).
fn fit_width(px: &Array2<f32>) -> Array2<f32> {
    let (h, w) = px.dim();
    let (ch, cw) = BASELINE_CROP;
    let oh = h.max(ch);
    let mut out = Array2::from_elem((oh, cw), INT8_FLOOR);
    if w >= cw {
        let left = (w - cw) / 2;
        out.slice_mut(s![..h, ..]).assign(&px.slice(s![.., left..left + cw]));
    } else {
        let left = (cw - w) / 2;
        out.slice_mut(s![..h, left..left + w]).assign(px);
    }
    out
}

/// Scan `100 x 512` windows down the image every `stride` rows (the last
/// window is always included). Dual-output models take the window with the
/// highest presence probability; single-output models take the median of the
/// votes that fall inside their own window.
pub fn sliding_window_predict(model: &dyn WindowModel, img: &MipImage, stride: usize) -> Result<PredictionResult> {
    if model.variant().is_unet() {
        return Err(Error::Config(format!("{} is not a sliding-window model", model.variant())));
    }
    if stride == 0 {
        return Err(Error::Domain("stride must be at least 1".into()));
    }
    let start = Instant::now();
    let px = fit_width(&img.pixels);
    let (ch, cw) = BASELINE_CROP;
    let last = px.nrows() - ch;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    let mut outputs = Vec::with_capacity(offsets.len());
    for chunk in offsets.chunks(WINDOW_BATCH) {
        let mut batch = Array4::<f32>::zeros((chunk.len(), 1, ch, cw));
        for (i, &o) in chunk.iter().enumerate() {
            batch.slice_mut(s![i, 0, .., ..]).assign(&px.slice(s![o..o + ch, ..]));
        }
        outputs.extend(model.regress(&batch)?);
    }
    let height = img.height();
    let mut map = Array2::<f32>::zeros((height, 1));
    let (y, confidence) = if model.variant().is_dual() {
        let mut best = 0usize;
        for (i, out) in outputs.iter().enumerate() {
            let p = out.presence.unwrap_or(0.0);
            map[[offsets[i].min(height - 1), 0]] = map[[offsets[i].min(height - 1), 0]].max(p as f32);
            if p > outputs[best].presence.unwrap_or(0.0) {
                best = i;
            }
        }
        let local = outputs[best].y_local.round().clamp(0.0, (ch - 1) as f64);
        (offsets[best] as f64 + local, outputs[best].presence.unwrap_or(0.0))
    } else {
        let votes: Vec<f64> = offsets.iter().zip(&outputs).map(|(&o, out)| o as f64 + out.y_local).collect();
        let inside: Vec<f64> = offsets
            .iter()
            .zip(&votes)
            .filter(|(&o, &v)| v >= o as f64 && v < (o + ch) as f64)
            .map(|(_, &v)| v)
            .collect();
        let pool = if inside.is_empty() { &votes } else { &inside };
        let med = crate::eval::median(pool);
        let agree = if inside.is_empty() {
            0.0
        } else {
            inside.iter().filter(|v| (*v - med).abs() <= VOTE_RADIUS_MM).count() as f64 / votes.len() as f64
        };
        for v in pool {
            let r = v.round().clamp(0.0, (height - 1) as f64) as usize;
            map[[r, 0]] += 1.0 / votes.len() as f32;
        }
        (med, agree)
    };
    let y_mm = y.round().clamp(0.0, (height - 1) as f64);
    Ok(PredictionResult {
        image_id: img.source_id.clone(),
        view: img.view,
        variant: model.variant(),
        y_mm,
        slice_index: slice_from_thickness(img, y_mm),
        confidence,
        low_confidence: confidence < LOW_CONFIDENCE,
        elapsed_s: start.elapsed().as_secs_f64(),
        map,
    })
}

/// Predict with whichever path fits the model's variant.
pub fn predict_any(model: &Model, img: &MipImage, stride: usize) -> Result<PredictionResult> {
    if model.variant().is_unet() {
        predict(model, img)
    } else {
        sliding_window_predict(model, img, stride)
    }
}

/// Preprocess a volume, predict on one view and map the row back to a slice.
pub fn predict_volume(model: &Model, vol: &Volume3D, view: View, stride: usize) -> Result<PredictionResult> {
    let (frontal, sagittal) = preprocess_volume(vol)?;
    let img = match view {
        View::Frontal => frontal,
        View::SagittalRestricted => sagittal,
    };
    let mut result = predict_any(model, &img, stride)?;
    result.slice_index = Some(slice_index_for_y(vol, result.y_mm)?);
    Ok(result)
}

/// Grayscale MIP with the map blended in, the prediction in red and the
/// ground truth (if any) in green. Rows are written in image order.
pub fn render_overlay(img: &MipImage, prediction: &PredictionResult, ground_truth_mm: Option<f64>) -> image::RgbImage {
    let (h, w) = img.pixels.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    let map = &prediction.map;
    for r in 0..h {
        for c in 0..w {
            let g = (img.pixels[[r, c]] + 127.0).clamp(0.0, 254.0);
            let m = if map.dim() == (h, w) {
                map[[r, c]]
            } else if map.nrows() == h && map.ncols() == 1 {
                map[[r, 0]]
            } else {
                0.0
            };
            let a = 0.5 * m.clamp(0.0, 1.0);
            let red = g * (1.0 - a) + 255.0 * a;
            out.put_pixel(c as u32, r as u32, image::Rgb([red as u8, (g * (1.0 - a)) as u8, (g * (1.0 - a)) as u8]));
        }
    }
    let mut line = |y: f64, color: [u8; 3]| {
        let r = y.round();
        if r >= 0.0 && (r as usize) < h {
            for c in 0..w {
                out.put_pixel(c as u32, r as u32, image::Rgb(color));
            }
        }
    };
    if let Some(gt) = ground_truth_mm {
        line(gt / img.spacing[0], [0, 255, 0]);
    }
    line(prediction.y_mm / img.spacing[0], [255, 0, 0]);
    out
}

pub fn save_overlay(path: impl AsRef<Path>, img: &MipImage, prediction: &PredictionResult, gt: Option<f64>) -> Result<()> {
    render_overlay(img, prediction, gt).save(path.as_ref())?;
    Ok(())
}

/// Median wall time in seconds over `runs` calls after `warmups` calls.
pub fn time_median<T>(warmups: usize, runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(crate::eval::median(&times))
}
