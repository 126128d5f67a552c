//! Ground-truth confidence maps and annotations.
//!
//! A 2D target is a horizontal segment `[x0 - v, x0 + v]` on the annotated row,
//! blurred with an isotropic Gaussian and rescaled so its peak is exactly 1.
//! The 1D target is the blurred indicator of the annotated row, which is the
//! peak-normalised Gaussian itself. Gaussians are evaluated without truncation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default plateau half-width in pixels.
pub const DEFAULT_PLATEAU_HALF_WIDTH: f64 = 50.0;
pub const SIGMA_START: f64 = 10.0;
pub const SIGMA_END: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap2D {
    pub values: Array2<f32>,
    pub sigma: f64,
    pub plateau_half_width: f64,
    pub plateau_center: f64,
    pub y_true: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap1D {
    pub values: Array1<f32>,
    pub sigma: f64,
    pub y_true: usize,
}

fn gaussian(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

fn check_common(height: usize, y_true: usize, sigma: f64) -> Result<()> {
    if y_true >= height {
        return Err(Error::Domain(format!("annotated row {y_true} outside image of height {height}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Domain(format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

/// Row profile shared by both map kinds: `exp(-(y - y_true)^2 / (2 sigma^2))`.
fn row_profile(height: usize, y_true: usize, sigma: f64) -> Vec<f64> {
    (0..height).map(|y| gaussian(y as f64 - y_true as f64, sigma)).collect()
}

pub fn make_confidence_map_1d(height: usize, y_true: usize, sigma: f64) -> Result<ConfidenceMap1D> {
    check_common(height, y_true, sigma)?;
    let values = row_profile(height, y_true, sigma).into_iter().map(|v| v as f32).collect();
    Ok(ConfidenceMap1D { values, sigma, y_true })
}

/// 2D target with an explicit plateau half-width `v` and centre column `x0`.
pub fn make_confidence_map_2d(
    height: usize,
    width: usize,
    y_true: usize,
    sigma: f64,
    v: f64,
    x0: f64,
) -> Result<ConfidenceMap2D> {
    check_common(height, y_true, sigma)?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Domain(format!("plateau half-width {v} must be non-negative")));
    }
    if !(x0 >= 0.0 && x0 < width as f64) {
        return Err(Error::Domain(format!("plateau centre {x0} outside image of width {width}")));
    }
    let rows = row_profile(height, y_true, sigma);
    // The segment lives on the unbounded plane, so the blurred profile stays
    // symmetric about x0 even when the segment leaves the image.
    let lo = (x0 - v).ceil() as i64;
    let hi = (x0 + v).floor() as i64;
    let cols: Vec<f64> = (0..width)
        .map(|x| (lo..=hi).map(|s| gaussian(x as f64 - s as f64, sigma)).sum())
        .collect();
    let peak = cols.iter().copied().fold(0.0f64, f64::max) * rows[y_true];
    let values = Array2::from_shape_fn((height, width), |(y, x)| (rows[y] * cols[x] / peak) as f32);
    Ok(ConfidenceMap2D { values, sigma, plateau_half_width: v, plateau_center: x0, y_true })
}

/// 2D target with the default plateau (`v = 50`, centred in the image).
pub fn make_confidence_map_2d_default(height: usize, width: usize, y_true: usize, sigma: f64) -> Result<ConfidenceMap2D> {
    make_confidence_map_2d(height, width, y_true, sigma, DEFAULT_PLATEAU_HALF_WIDTH, (width / 2) as f64)
}

/// Linear annealing of sigma from `start` at epoch 0 to `end` at the last epoch.
/// A single-epoch schedule uses `end`.
pub fn sigma_schedule(epoch: usize, total_epochs: usize, start: f64, end: f64) -> Result<f64> {
    if total_epochs < 1 {
        return Err(Error::Domain("schedule needs at least one epoch".into()));
    }
    if epoch >= total_epochs {
        return Err(Error::Domain(format!("epoch {epoch} outside schedule of {total_epochs}")));
    }
    if total_epochs == 1 {
        return Ok(end);
    }
    Ok(start + (end - start) * epoch as f64 / (total_epochs - 1) as f64)
}

pub fn default_sigma_schedule(epoch: usize, total_epochs: usize) -> Result<f64> {
    sigma_schedule(epoch, total_epochs, SIGMA_START, SIGMA_END)
}

/// One annotator's L3 position for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub annotator: String,
    pub y_mm: f64,
    #[serde(with = "bool_flag")]
    pub ambiguous: bool,
}

impl Annotation {
    pub fn validate(&self, image_height_mm: Option<f64>) -> Result<()> {
        if !self.y_mm.is_finite() || self.y_mm < 0.0 {
            return Err(Error::Domain(format!("{}: y_mm {} must be >= 0", self.image_id, self.y_mm)));
        }
        if let Some(h) = image_height_mm {
            if self.y_mm > h {
                return Err(Error::Domain(format!("{}: y_mm {} beyond image height {h}", self.image_id, self.y_mm)));
            }
        }
        Ok(())
    }
}

/// Accepts `true/false/1/0` when reading; writes `true/false`.
mod bool_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bool(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        let s = String::deserialize(d)?;
        match s.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" | "" => Ok(false),
            other => Err(serde::de::Error::custom(format!("invalid flag {other:?}"))),
        }
    }
}

pub const ANNOTATION_HEADER: [&str; 4] = ["image_id", "annotator", "y_mm", "ambiguous"];

/// Parse `image_id,annotator,y_mm,ambiguous` (header required).
pub fn read_annotations(reader: impl Read) -> Result<Vec<Annotation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ANNOTATION_HEADER {
        return Err(Error::Format(format!("annotation header must be {}", ANNOTATION_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let ann: Annotation = row?;
        ann.validate(None)?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations(writer: impl Write, annotations: &[Annotation]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(ANNOTATION_HEADER)?;
    for a in annotations {
        wtr.serialize(a)?;
    }
    wtr.flush().map_err(|e| Error::io("<annotation csv>", e))?;
    Ok(())
}

/// Merged ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub y_mm: f64,
    pub ambiguous: bool,
    pub annotators: usize,
}

/// Floor of the mean annotator position per image; an image is ambiguous if
/// any annotator flagged it.
pub fn merge_annotations(annotations: &[Annotation]) -> BTreeMap<String, GroundTruth> {
    let mut groups: BTreeMap<String, Vec<&Annotation>> = BTreeMap::new();
    for a in annotations {
        groups.entry(a.image_id.clone()).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(id, anns)| {
            let mean = anns.iter().map(|a| a.y_mm).sum::<f64>() / anns.len() as f64;
            let gt = GroundTruth {
                y_mm: mean.floor(),
                ambiguous: anns.iter().any(|a| a.ambiguous),
                annotators: anns.len(),
            };
            (id, gt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_map_is_peak_normalised_gaussian() {
        let m = make_confidence_map_1d(64, 30, 3.0).unwrap();
        assert_eq!(m.values[30], 1.0);
        let e = (-0.5f64).exp() as f32;
        assert!((m.values[27] - e).abs() < 1e-7 && (m.values[33] - e).abs() < 1e-7);
        assert!((m.values[27] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn one_dimensional_mass_matches_gaussian_integral() {
        let sigma = 3.0;
        let m = make_confidence_map_1d(200, 100, sigma).unwrap();
        let mass: f64 = m.values.iter().map(|&v| v as f64).sum();
        let expect = sigma * (2.0 * std::f64::consts::PI).sqrt();
        assert!((mass - expect).abs() / expect < 0.01);
    }

    #[test]
    fn two_dimensional_peak_and_symmetry() {
        let m = make_confidence_map_2d_default(120, 200, 60, 3.0).unwrap();
        assert!((m.values[[60, 100]] - 1.0).abs() < 1e-6);
        for k in 1..20 {
            assert!((m.values[[60 - k, 100]] - m.values[[60 + k, 100]]).abs() < 1e-6);
        }
        // inside the plateau the row is flat to within the Gaussian tail
        assert!((m.values[[60, 70]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_plateau_matches_closed_form() {
        let (h, w, y0, x0, sigma) = (40, 30, 17, 12.0, 2.5);
        let m = make_confidence_map_2d(h, w, y0, sigma, 0.0, x0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - y0 as f64).powi(2) + (x as f64 - x0).powi(2);
                let expect = (-d2 / (2.0 * sigma * sigma)).exp();
                assert!((m.values[[y, x]] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_annotation_rejected() {
        assert!(matches!(make_confidence_map_1d(10, 10, 1.0), Err(Error::Domain(_))));
        assert!(matches!(make_confidence_map_2d(10, 10, 3, 1.0, 2.0, 10.0), Err(Error::Domain(_))));
        assert!(make_confidence_map_1d(10, 3, 0.0).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(default_sigma_schedule(0, 50).unwrap(), 10.0);
        assert_eq!(default_sigma_schedule(49, 50).unwrap(), 1.5);
        let mid = default_sigma_schedule(24, 50).unwrap();
        assert!((mid - (10.0 - 8.5 * 24.0 / 49.0)).abs() < 1e-12);
        assert!((mid - 5.837).abs() < 1e-3);
        assert!(default_sigma_schedule(0, 0).is_err());
        assert!(default_sigma_schedule(50, 50).is_err());
        assert_eq!(default_sigma_schedule(0, 1).unwrap(), 1.5);
    }

    #[test]
    fn csv_round_trip_and_floor_merge() {
        let anns = vec![
            Annotation { image_id: "a".into(), annotator: "A".into(), y_mm: 100.0, ambiguous: false },
            Annotation { image_id: "a".into(), annotator: "B".into(), y_mm: 101.0, ambiguous: false },
            Annotation { image_id: "b".into(), annotator: "A".into(), y_mm: 50.0, ambiguous: true },
        ];
        let mut buf = Vec::new();
        write_annotations(&mut buf, &anns).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,annotator,y_mm,ambiguous\n"));
        let back = read_annotations(buf.as_slice()).unwrap();
        assert_eq!(back, anns);
        let merged = merge_annotations(&back);
        assert_eq!(merged["a"].y_mm, 100.0);
        assert!(merged["b"].ambiguous);
    }

    #[test]
    fn csv_requires_header_and_valid_rows() {
        assert!(read_annotations("a,A,10,false\n".as_bytes()).is_err());
        let bad = "image_id,annotator,y_mm,ambiguous\na,A,-3,false\n";
        assert!(read_annotations(bad.as_bytes()).is_err());
        let flags = "image_id,annotator,y_mm,ambiguous\na,A,3,1\nb,A,4,0\n";
        let anns = read_annotations(flags.as_bytes()).unwrap();
        assert!(anns[0].ambiguous && !anns[1].ambiguous);
    }

    proptest::proptest! {
        #[test]
        fn maps_stay_in_unit_range_with_peak_at_annotation(
            h in 8usize..120, frac in 0.0f64..1.0, sigma in 0.5f64..12.0, v in 0.0f64..60.0,
        ) {
            let y = ((h - 1) as f64 * frac) as usize;
            let m = make_confidence_map_2d(h, 32, y, sigma, v, 16.0).unwrap();
            proptest::prop_assert!(m.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let col: Vec<f32> = m.values.column(16).to_vec();
            let arg = col.iter().enumerate().fold((0, f32::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
            proptest::prop_assert_eq!(arg, y);
            // monotone decay away from the peak along y
            for r in y + 1..h {
                proptest::prop_assert!(col[r] <= col[r - 1]);
            }
            let one = make_confidence_map_1d(h, y, sigma).unwrap();
            let flat = make_confidence_map_2d(h, 32, y, sigma, 0.0, 16.0).unwrap();
            for r in 0..h {
                proptest::prop_assert!((one.values[r] - flat.values[[r, 16]]).abs() < 1e-6);
            }
        }

        #[test]
        fn wider_sigma_never_lowers_off_peak_values(h in 10usize..80, frac in 0.0f64..1.0, s1 in 0.5f64..6.0, ds in 0.0f64..6.0) {
            let y = ((h - 1) as f64 * frac) as usize;
            let a = make_confidence_map_1d(h, y, s1).unwrap();
            let b = make_confidence_map_1d(h, y, s1 + ds).unwrap();
            for r in 0..h {
                proptest::prop_assert!(b.values[r] >= a.values[r]);
            }
        }
    }
}
