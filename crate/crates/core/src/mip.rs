//! Maximal intensity projections and their preprocessing.
//!
//! A volume becomes two images: a frontal MIP (max over the anterior-posterior
//! axis) and a restricted sagittal MIP (max over a band of columns around the
//! left-right centre). Both are resampled to 1x1 mm pixels, windowed to
//! [100, 1500] HU and mapped linearly to integers in [-127, 127].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resample_cols, resample_rows};
use crate::volume_io::Volume3D;

pub const HU_WINDOW_LOW: f32 = 100.0;
pub const HU_WINDOW_HIGH: f32 = 1500.0;
pub const INT8_FLOOR: f32 = -127.0;
pub const INT8_CEIL: f32 = 127.0;
/// Default half-width of the sagittal projection band.
pub const SAGITTAL_HALF_WIDTH_MM: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Frontal,
    #[serde(rename = "sagittal", alias = "sagittal_restricted")]
    SagittalRestricted,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::SagittalRestricted => "sagittal",
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(View::Frontal),
            "sagittal" | "sagittal_restricted" => Ok(View::SagittalRestricted),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityDomain {
    Hu,
    Int8,
}

/// A projected image. Rows run inferior→superior; `spacing` is (row, column) mm.
#[derive(Debug, Clone, PartialEq)]
pub struct MipImage {
    pub pixels: Array2<f32>,
    pub spacing: [f64; 2],
    pub domain: IntensityDomain,
    pub view: View,
    pub source_id: String,
    /// Slice thickness of the volume the image was projected from, if known.
    pub slice_thickness_mm: Option<f64>,
}

impl MipImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height_mm(&self) -> f64 {
        self.height() as f64 * self.spacing[0]
    }

    pub fn width_mm(&self) -> f64 {
        self.width() as f64 * self.spacing[1]
    }

    /// Check the invariants of a fully preprocessed image.
    pub fn validate_preprocessed(&self) -> Result<()> {
        if self.height() == 0 || self.width() == 0 {
            return Err(Error::Shape("MIP image must be at least 1x1".into()));
        }
        if self.domain != IntensityDomain::Int8 {
            return Err(Error::Format("expected an 8-bit image".into()));
        }
        if self.spacing != [1.0, 1.0] {
            return Err(Error::Format(format!("expected 1x1 mm pixels, got {:?}", self.spacing)));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(v.fract() == 0.0 && (INT8_FLOOR..=INT8_CEIL).contains(*v))) {
            return Err(Error::Format(format!("pixel {v} outside the integral range [-127, 127]")));
        }
        Ok(())
    }

    /// Filename stem used for persisted images: `<source_id>_<view>`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.source_id, self.view)
    }
}

/// Frontal projection: `out[i, k] = max_j vol[i, j, k]`.
pub fn project_frontal(vol: &Volume3D) -> MipImage {
    let pixels = vol.data().fold_axis(Axis(1), f32::NEG_INFINITY, |a, &b| a.max(b));
    let sp = vol.spacing();
    MipImage {
        pixels,
        spacing: [sp.z, sp.x],
        domain: IntensityDomain::Hu,
        view: View::Frontal,
        source_id: vol.id().to_string(),
        slice_thickness_mm: Some(sp.z),
    }
}

/// Inclusive column range `[c - w, c + w]` of the restricted sagittal band,
/// clamped to the volume, with `c = columns / 2` and `w = round(half_width / x)`.
pub fn sagittal_band(columns: usize, spacing_x: f64, half_width_mm: f64) -> (usize, usize) {
    let c = (columns / 2) as i64;
    let w = (half_width_mm / spacing_x).round() as i64;
    let lo = (c - w).max(0) as usize;
    let hi = (c + w).min(columns as i64 - 1) as usize;
    (lo, hi)
}

/// Sagittal projection over the central band: `out[i, j] = max_{k in band} vol[i, j, k]`.
pub fn project_sagittal_restricted(vol: &Volume3D, half_width_mm: f64) -> Result<MipImage> {
    if !(half_width_mm.is_finite() && half_width_mm > 0.0) {
        return Err(Error::Domain(format!("half width {half_width_mm} mm must be positive")));
    }
    let sp = vol.spacing();
    let (lo, hi) = sagittal_band(vol.extents().2, sp.x, half_width_mm);
    let band = vol.data().slice(s![.., .., lo..=hi]);
    let pixels = band.fold_axis(Axis(2), f32::NEG_INFINITY, |a, &b| a.max(b));
    Ok(MipImage {
        pixels,
        spacing: [sp.z, sp.y],
        domain: IntensityDomain::Hu,
        view: View::SagittalRestricted,
        source_id: vol.id().to_string(),
        slice_thickness_mm: Some(sp.z),
    })
}

/// Linear resampling to 1x1 mm pixels. New extents are `round(extent * spacing)`.
pub fn resample_to_1mm(img: &MipImage) -> MipImage {
    let [sr, sc] = img.spacing;
    let (h, w) = img.pixels.dim();
    let nh = ((h as f64 * sr).round() as usize).max(1);
    let nw = ((w as f64 * sc).round() as usize).max(1);
    let rows = if sr == 1.0 && nh == h { img.pixels.clone() } else { resample_rows(&img.pixels, nh, 1.0 / sr) };
    let pixels = if sc == 1.0 && nw == w { rows } else { resample_cols(&rows, nw, 1.0 / sc) };
    MipImage { pixels, spacing: [1.0, 1.0], ..img.clone() }
}

/// Window to [100, 1500] HU and map affinely onto [-127, 127], rounding to the
/// nearest integer.
pub fn quantize_hu(v: f32) -> f32 {
    let c = v.clamp(HU_WINDOW_LOW, HU_WINDOW_HIGH) as f64;
    let span = (HU_WINDOW_HIGH - HU_WINDOW_LOW) as f64;
    (INT8_FLOOR as f64 + (c - HU_WINDOW_LOW as f64) / span * 254.0).round() as f32
}

/// HU value that [`quantize_hu`] maps to a given 8-bit level.
pub fn dequantize(level: f32) -> f32 {
    let span = HU_WINDOW_HIGH - HU_WINDOW_LOW;
    HU_WINDOW_LOW + (level - INT8_FLOOR) / 254.0 * span
}

pub fn threshold_and_quantize(img: &MipImage) -> MipImage {
    MipImage { pixels: img.pixels.mapv(quantize_hu), domain: IntensityDomain::Int8, ..img.clone() }
}

/// Project, resample to 1 mm and quantize, for both views.
pub fn preprocess_volume(vol: &Volume3D) -> Result<(MipImage, MipImage)> {
    let frontal = threshold_and_quantize(&resample_to_1mm(&project_frontal(vol)));
    let sagittal = threshold_and_quantize(&resample_to_1mm(&project_sagittal_restricted(
        vol,
        SAGITTAL_HALF_WIDTH_MM,
    )?));
    debug_assert_eq!(frontal.height(), sagittal.height());
    Ok((frontal, sagittal))
}

/// JSON sidecar stored next to each MIP PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MipSidecar {
    pub source_id: String,
    pub view: View,
    pub height_mm: f64,
    pub width_mm: f64,
    pub original_slice_thickness_mm: Option<f64>,
}

/// Write `<dir>/<source_id>_<view>.png` (gray level = value + 127) and its
/// `.json` sidecar. Returns the PNG path.
pub fn save_mip(img: &MipImage, dir: impl AsRef<Path>) -> Result<PathBuf> {
    img.validate_preprocessed()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png_path = dir.join(format!("{}.png", img.file_stem()));
    let (h, w) = img.pixels.dim();
    let raw: Vec<u8> = img.pixels.iter().map(|v| (v + 127.0) as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from image");
    buf.save(&png_path)?;
    let sidecar = MipSidecar {
        source_id: img.source_id.clone(),
        view: img.view,
        height_mm: img.height_mm(),
        width_mm: img.width_mm(),
        original_slice_thickness_mm: img.slice_thickness_mm,
    };
    let json_path = png_path.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(png_path)
}

pub fn read_sidecar(png_path: impl AsRef<Path>) -> Result<MipSidecar> {
    let json_path = png_path.as_ref().with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a PNG written by [`save_mip`] together with its sidecar.
pub fn load_mip(png_path: impl AsRef<Path>) -> Result<MipImage> {
    let png_path = png_path.as_ref();
    let sidecar = read_sidecar(png_path)?;
    let img = image::open(png_path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(png_path, io),
            other => Error::Image(other),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let pixels = Array2::from_shape_vec(
        (h as usize, w as usize),
        img.into_raw().into_iter().map(|v| (v.min(254) as f32) - 127.0).collect(),
    )
    .expect("dimensions from decoder");
    Ok(MipImage {
        pixels,
        spacing: [1.0, 1.0],
        domain: IntensityDomain::Int8,
        view: sidecar.view,
        source_id: sidecar.source_id,
        slice_thickness_mm: sidecar.original_slice_thickness_mm,
    })
}
