//! Training-time augmentation of 8-bit MIP images and their row labels.
//!
//! Transforms are applied in a fixed order (flip, scale, piecewise-affine
//! warp, slice-thickness simulation, intensity offset, drop-outs,
//! over-exposures), each with its own sampled parameters. Every sampled value
//! is returned in [`AppliedTransforms`] so a run can be replayed.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mip::{IntensityDomain, MipImage, INT8_CEIL, INT8_FLOOR};
use crate::resample::{resample_cols, resample_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub scale_range: [f64; 2],
    pub intensity_offset_range: [f64; 2],
    pub piecewise_affine_prob: f64,
    /// Control points per side of the warp grid.
    pub piecewise_affine_grid: usize,
    /// Standard deviation of control-point displacements, in pixels.
    pub piecewise_affine_jitter: f64,
    pub dropout_prob: f64,
    pub dropout_region_count: [usize; 2],
    pub dropout_region_size: [usize; 2],
    pub overexposure_prob: f64,
    pub overexposure_region_count: [usize; 2],
    pub overexposure_region_size: [usize; 2],
    pub thickness_prob: f64,
    pub max_simulated_thickness_mm: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            scale_range: [0.8, 1.2],
            intensity_offset_range: [-70.0, 70.0],
            piecewise_affine_prob: 0.5,
            piecewise_affine_grid: 4,
            piecewise_affine_jitter: 2.0,
            dropout_prob: 0.5,
            dropout_region_count: [0, 3],
            dropout_region_size: [10, 60],
            overexposure_prob: 0.5,
            overexposure_region_count: [0, 3],
            overexposure_region_size: [10, 60],
            thickness_prob: 0.5,
            max_simulated_thickness_mm: 7.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which [`augment`] returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            flip_h_prob: 0.0,
            scale_range: [1.0, 1.0],
            intensity_offset_range: [0.0, 0.0],
            piecewise_affine_prob: 0.0,
            piecewise_affine_jitter: 0.0,
            dropout_prob: 0.0,
            dropout_region_count: [0, 0],
            overexposure_prob: 0.0,
            overexposure_region_count: [0, 0],
            thickness_prob: 0.0,
            max_simulated_thickness_mm: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("flip_h_prob", self.flip_h_prob)?;
        prob("piecewise_affine_prob", self.piecewise_affine_prob)?;
        prob("dropout_prob", self.dropout_prob)?;
        prob("overexposure_prob", self.overexposure_prob)?;
        prob("thickness_prob", self.thickness_prob)?;
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range {:?} must satisfy 0 < lo <= hi", self.scale_range)));
        }
        if self.intensity_offset_range[0] > self.intensity_offset_range[1] {
            return Err(Error::Config("intensity_offset_range must be ordered".into()));
        }
        if !(self.max_simulated_thickness_mm >= 1.0 && self.max_simulated_thickness_mm <= 7.0) {
            return Err(Error::Config("max_simulated_thickness_mm must lie in [1, 7]".into()));
        }
        if self.piecewise_affine_grid < 2 || self.piecewise_affine_jitter < 0.0 {
            return Err(Error::Config("piecewise affine needs grid >= 2 and jitter >= 0".into()));
        }
        for (name, r) in [
            ("dropout_region_count", self.dropout_region_count),
            ("dropout_region_size", self.dropout_region_size),
            ("overexposure_region_count", self.overexposure_region_count),
            ("overexposure_region_size", self.overexposure_region_size),
        ] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} {r:?} must be ordered")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    pub grid: usize,
    /// `(dy, dx)` per control point, row-major over the grid.
    pub displacements: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransforms {
    pub flipped: bool,
    pub scale: f64,
    pub warp: Option<WarpRecord>,
    pub thickness_mm: Option<f64>,
    pub intensity_offset: f64,
    pub dropouts: Vec<Rect>,
    pub overexposures: Vec<Rect>,
    pub y_in: f64,
    pub y_out: f64,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: MipImage,
    pub y_true: f64,
    pub applied: AppliedTransforms,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn uniform_usize(rng: &mut impl Rng, [lo, hi]: [usize; 2]) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn augment(img: &MipImage, y_true: f64, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Augmented> {
    cfg.validate()?;
    if img.domain != IntensityDomain::Int8 {
        return Err(Error::Format("augmentation expects an 8-bit image".into()));
    }
    let mut px = img.pixels.clone();
    let mut y = y_true;

    let flipped = rng.random_bool(cfg.flip_h_prob);
    if flipped {
        px.invert_axis(ndarray::Axis(1));
        px = px.as_standard_layout().into_owned();
    }

    let scale = uniform(rng, cfg.scale_range);
    if scale != 1.0 {
        let (h, w) = px.dim();
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        px = resample_cols(&resample_rows(&px, nh, 1.0 / scale), nw, 1.0 / scale);
        y = (scale * y).round();
    }

    let warp = if cfg.piecewise_affine_jitter > 0.0 && rng.random_bool(cfg.piecewise_affine_prob) {
        let g = cfg.piecewise_affine_grid;
        let normal = Normal::new(0.0, cfg.piecewise_affine_jitter).expect("validated jitter");
        let displacements: Vec<[f64; 2]> = (0..g * g).map(|_| [normal.sample(rng), normal.sample(rng)]).collect();
        let record = WarpRecord { grid: g, displacements };
        let (warped, dy_at_label) = piecewise_affine(&px, &record, y);
        px = warped;
        y = (y - dy_at_label).round().clamp(0.0, (px.nrows() - 1) as f64);
        Some(record)
    } else {
        None
    };

    let thickness_mm = if cfg.max_simulated_thickness_mm > 1.0 && rng.random_bool(cfg.thickness_prob) {
        let t = uniform(rng, [1.0, cfg.max_simulated_thickness_mm]);
        px = thicken(&px, t);
        Some(t)
    } else {
        None
    };

    let intensity_offset = uniform(rng, cfg.intensity_offset_range).round();
    if intensity_offset != 0.0 {
        px.mapv_inplace(|v| v + intensity_offset as f32);
    }
    px.mapv_inplace(|v| v.round().clamp(INT8_FLOOR, INT8_CEIL));

    let dropouts = paint_regions(
        &mut px,
        rng,
        cfg.dropout_prob,
        cfg.dropout_region_count,
        cfg.dropout_region_size,
        INT8_FLOOR,
    );
    let overexposures = paint_regions(
        &mut px,
        rng,
        cfg.overexposure_prob,
        cfg.overexposure_region_count,
        cfg.overexposure_region_size,
        INT8_CEIL,
    );

    let y = y.clamp(0.0, (px.nrows() - 1) as f64);
    let applied = AppliedTransforms {
        flipped,
        scale,
        warp,
        thickness_mm,
        intensity_offset,
        dropouts,
        overexposures,
        y_in: y_true,
        y_out: y,
    };
    Ok(Augmented { image: MipImage { pixels: px, ..img.clone() }, y_true: y, applied })
}

fn paint_regions(
    px: &mut Array2<f32>,
    rng: &mut impl Rng,
    prob: f64,
    count: [usize; 2],
    size: [usize; 2],
    value: f32,
) -> Vec<Rect> {
    if count[1] == 0 || !rng.random_bool(prob) {
        return Vec::new();
    }
    let (h, w) = px.dim();
    let n = uniform_usize(rng, count);
    let mut rects = Vec::with_capacity(n);
    for _ in 0..n {
        let rh = uniform_usize(rng, size).min(h);
        let rw = uniform_usize(rng, size).min(w);
        if rh == 0 || rw == 0 {
            continue;
        }
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        px.slice_mut(ndarray::s![top..top + rh, left..left + rw]).fill(value);
        rects.push(Rect { top, left, height: rh, width: rw });
    }
    rects
}

/// Bilinear interpolation of the control-point displacement field at `(r, c)`.
fn displacement_at(record: &WarpRecord, h: usize, w: usize, r: f64, c: f64) -> [f64; 2] {
    let g = record.grid;
    let gy = if h > 1 { r / (h - 1) as f64 * (g - 1) as f64 } else { 0.0 };
    let gx = if w > 1 { c / (w - 1) as f64 * (g - 1) as f64 } else { 0.0 };
    let (i0, j0) = ((gy.floor() as usize).min(g - 2), (gx.floor() as usize).min(g - 2));
    let (ty, tx) = (gy - i0 as f64, gx - j0 as f64);
    let d = |i: usize, j: usize| record.displacements[i * g + j];
    let mut out = [0.0; 2];
    for (k, v) in out.iter_mut().enumerate() {
        let top = d(i0, j0)[k] * (1.0 - tx) + d(i0, j0 + 1)[k] * tx;
        let bot = d(i0 + 1, j0)[k] * (1.0 - tx) + d(i0 + 1, j0 + 1)[k] * tx;
        *v = top * (1.0 - ty) + bot * ty;
    }
    out
}

/// Warp `out(r, c) = in(r + dy, c + dx)`; also returns `dy` at the label row
/// on the centre column.
fn piecewise_affine(px: &Array2<f32>, record: &WarpRecord, y: f64) -> (Array2<f32>, f64) {
    let (h, w) = px.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let [dy, dx] = displacement_at(record, h, w, r as f64, c as f64);
            out[[r, c]] = bilinear(px, r as f64 + dy, c as f64 + dx);
        }
    }
    let dy = displacement_at(record, h, w, y, (w / 2) as f64)[0];
    (out, dy)
}

fn bilinear(px: &Array2<f32>, r: f64, c: f64) -> f32 {
    let (h, w) = px.dim();
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (tr, tc) = ((r - r0 as f64) as f32, (c - c0 as f64) as f32);
    let top = px[[r0, c0]] * (1.0 - tc) + px[[r0, c1]] * tc;
    let bot = px[[r1, c0]] * (1.0 - tc) + px[[r1, c1]] * tc;
    top * (1.0 - tr) + bot * tr
}

fn thicken(px: &Array2<f32>, thickness_mm: f64) -> Array2<f32> {
    let h = px.nrows();
    let coarse = ((h as f64 / thickness_mm).round() as usize).max(1);
    let down = resample_rows(px, coarse, thickness_mm);
    resample_rows(&down, h, 1.0 / thickness_mm)
}

/// Simulate a thicker acquisition: sample rows every `thickness_mm` pixels
/// with linear interpolation, then interpolate back to the original height.
/// Width and height are unchanged.
pub fn simulate_thickness(img: &MipImage, thickness_mm: f64) -> Result<MipImage> {
    if !(1.0..=7.0).contains(&thickness_mm) {
        return Err(Error::Domain(format!("simulated thickness {thickness_mm} mm outside [1, 7]")));
    }
    if thickness_mm == 1.0 {
        return Ok(img.clone());
    }
    Ok(MipImage { pixels: thicken(&img.pixels, thickness_mm), ..img.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mip::View;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(pixels: Array2<f32>) -> MipImage {
        MipImage {
            pixels,
            spacing: [1.0, 1.0],
            domain: IntensityDomain::Int8,
            view: View::Frontal,
            source_id: "t".into(),
            slice_thickness_mm: Some(1.0),
        }
    }

    fn textured(h: usize, w: usize) -> MipImage {
        image(Array2::from_shape_fn((h, w), |(i, j)| ((i * 7 + j * 13) % 255) as f32 - 127.0))
    }

    #[test]
    fn identity_config_changes_nothing() {
        let img = textured(40, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&img, 17.0, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.y_true, 17.0);
    }

    #[test]
    fn horizontal_flip_mirrors_columns_only() {
        let img = textured(20, 9);
        let cfg = AugmentConfig { flip_h_prob: 1.0, ..AugmentConfig::identity() };
        let out = augment(&img, 5.0, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(out.applied.flipped);
        assert_eq!(out.y_true, 5.0);
        for i in 0..20 {
            for j in 0..9 {
                assert_eq!(out.image.pixels[[i, j]], img.pixels[[i, 8 - j]]);
            }
        }
    }

    #[test]
    fn vertical_scale_moves_label_with_image() {
        let mut px = Array2::from_elem((200, 20), -127.0f32);
        px.row_mut(100).fill(127.0);
        let img = image(px);
        let cfg = AugmentConfig { scale_range: [1.2, 1.2], ..AugmentConfig::identity() };
        let out = augment(&img, 100.0, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.y_true, 120.0);
        assert_eq!(out.image.pixels.dim(), (240, 24));
        // independent oracle: output row r samples input row r / 1.2
        let col: Vec<f32> = out.image.pixels.column(10).to_vec();
        let expect_row = |r: usize| {
            let pos = r as f64 / 1.2;
            let (i0, t) = (pos.floor() as usize, pos - pos.floor());
            let v = |i: usize| if i == 100 { 127.0 } else { -127.0 };
            (v(i0) * (1.0 - t) + v((i0 + 1).min(199)) * t).round()
        };
        for (r, &v) in col.iter().enumerate() {
            assert_eq!(v as f64, expect_row(r), "row {r}");
        }
        let argmax = col.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        assert_eq!(argmax, 120);
    }

    #[test]
    fn same_seed_same_output() {
        let img = textured(80, 64);
        let cfg = AugmentConfig::default();
        let a = augment(&img, 40.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&img, 40.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.applied, b.applied);
    }

    #[test]
    fn thickness_one_is_identity_and_constants_survive() {
        let img = textured(30, 5);
        assert_eq!(simulate_thickness(&img, 1.0).unwrap(), img);
        let flat = image(Array2::from_elem((50, 4), 33.0));
        for t in [1.5, 2.0, 4.0, 7.0] {
            let out = simulate_thickness(&flat, t).unwrap();
            assert_eq!(out.pixels.dim(), (50, 4));
            assert!(out.pixels.iter().all(|&v| (v - 33.0).abs() < 1e-4));
        }
        assert!(simulate_thickness(&img, 0.5).is_err());
        assert!(simulate_thickness(&img, 8.0).is_err());
    }

    #[test]
    fn bright_row_spreads_but_keeps_its_position() {
        let mut px = Array2::from_elem((200, 3), 0.0f32);
        px.row_mut(100).fill(100.0);
        let out = simulate_thickness(&image(px), 4.0).unwrap();
        let col: Vec<f32> = out.pixels.column(1).to_vec();
        let argmax = col.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        assert!((argmax as i64 - 100).abs() <= 2);
        let lit = col.iter().filter(|&&v| v > 1e-3).count();
        assert!((5..=8).contains(&lit), "spread over {lit} rows");
    }

    #[test]
    fn regions_are_recorded_and_painted() {
        let img = image(Array2::from_elem((100, 100), 0.0));
        let cfg = AugmentConfig {
            dropout_prob: 1.0,
            dropout_region_count: [2, 2],
            overexposure_prob: 1.0,
            overexposure_region_count: [1, 1],
            ..AugmentConfig::identity()
        };
        let out = augment(&img, 50.0, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out.applied.dropouts.len(), 2);
        assert_eq!(out.applied.overexposures.len(), 1);
        let r = out.applied.overexposures[0];
        assert_eq!(out.image.pixels[[r.top, r.left]], 127.0);
        assert_eq!(out.y_true, 50.0);
    }

    #[test]
    fn regions_larger_than_image_are_clipped() {
        let img = image(Array2::from_elem((5, 5), 0.0));
        let cfg = AugmentConfig { dropout_prob: 1.0, dropout_region_count: [1, 1], ..AugmentConfig::identity() };
        let out = augment(&img, 2.0, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(out.image.pixels.iter().all(|&v| v == -127.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let img = textured(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentConfig { scale_range: [0.0, 1.0], ..AugmentConfig::default() };
        assert!(augment(&img, 1.0, &bad, &mut rng).is_err());
        let bad = AugmentConfig { max_simulated_thickness_mm: 0.5, ..AugmentConfig::default() };
        assert!(augment(&img, 1.0, &bad, &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn outputs_stay_valid_and_labels_follow_geometry(seed in 0u64..10_000, y in 5.0f64..75.0) {
            let img = textured(80, 64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&img, y.round(), &AugmentConfig::default(), &mut rng).unwrap();
            out.image.validate_preprocessed().unwrap();
            let expect = (out.applied.scale * y.round()).round();
            // warps move the label by the interpolated displacement only
            let tol = if out.applied.warp.is_some() { 12.0 } else { 0.0 };
            proptest::prop_assert!((out.y_true - expect).abs() <= tol);
            proptest::prop_assert!(out.y_true >= 0.0 && out.y_true < out.image.height() as f64);
        }
    }
}
