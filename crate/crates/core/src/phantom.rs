//! Synthetic spine phantoms with a known L3 position.
//!
//! A phantom is a list of axis-aligned boxes in millimetres (vertebral bodies,
//! endplates, pedicles, transverse processes, ribs, spinous processes, a
//! sacrum wedge, iliac wings and contrast blobs). The same boxes are rendered
//! either directly as the two projections or as a voxel volume, so both paths
//! describe one anatomy. Row 0 is the inferior edge of the field of view and
//! one pixel is one millimetre.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::simulate_thickness;
use crate::error::{Error, Result};
use crate::mip::{sagittal_band, threshold_and_quantize, IntensityDomain, MipImage, View, SAGITTAL_HALF_WIDTH_MM};
use crate::targets::{write_annotations, Annotation};
use crate::volume_io::{save_volume, Spacing, Volume3D};

const SOFT_TISSUE_HU: f32 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Vertebrae stacked above the sacrum; the lowest five are lumbar.
    pub n_vertebrae: [usize; 2],
    pub lumbar_height: [f64; 2],
    pub thoracic_height: [f64; 2],
    pub lumbar_gap: [f64; 2],
    pub thoracic_gap: [f64; 2],
    pub body_half_width: [f64; 2],
    pub body_depth: [f64; 2],
    pub pedicle_width: [f64; 2],
    pub transverse_process_length: [f64; 2],
    pub transverse_process_thickness: [f64; 2],
    pub rib_length: [f64; 2],
    pub sacrum_height: [f64; 2],
    pub sacrum_half_width: [f64; 2],
    /// Distance from the bottom of the field of view up to the sacrum top.
    pub fov_below_sacrum: [f64; 2],
    pub fov_height: [usize; 2],
    /// Maximum lateral shift of the spine from the image centre.
    pub lateral_shift: f64,
    pub width: usize,
    pub depth: usize,
    pub thickness_range: [f64; 2],
    pub bone_hu: [f64; 2],
    pub noise_hu: f64,
    pub max_blobs: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_vertebrae: [12, 20],
            lumbar_height: [24.0, 32.0],
            thoracic_height: [16.0, 24.0],
            lumbar_gap: [7.0, 10.0],
            thoracic_gap: [6.0, 8.0],
            body_half_width: [16.0, 24.0],
            body_depth: [26.0, 34.0],
            pedicle_width: [5.0, 8.0],
            transverse_process_length: [10.0, 20.0],
            transverse_process_thickness: [5.0, 8.0],
            rib_length: [30.0, 55.0],
            sacrum_height: [45.0, 65.0],
            sacrum_half_width: [35.0, 48.0],
            fov_below_sacrum: [15.0, 120.0],
            fov_height: [192, 400],
            lateral_shift: 8.0,
            width: 128,
            depth: 128,
            thickness_range: [1.0, 5.0],
            bone_hu: [350.0, 550.0],
            noise_hu: 30.0,
            max_blobs: 3,
            max_retries: 50,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("lumbar_height", self.lumbar_height),
            ("thoracic_height", self.thoracic_height),
            ("lumbar_gap", self.lumbar_gap),
            ("thoracic_gap", self.thoracic_gap),
            ("body_half_width", self.body_half_width),
            ("body_depth", self.body_depth),
            ("pedicle_width", self.pedicle_width),
            ("transverse_process_length", self.transverse_process_length),
            ("transverse_process_thickness", self.transverse_process_thickness),
            ("rib_length", self.rib_length),
            ("sacrum_height", self.sacrum_height),
            ("sacrum_half_width", self.sacrum_half_width),
            ("fov_below_sacrum", self.fov_below_sacrum),
            ("thickness_range", self.thickness_range),
            ("bone_hu", self.bone_hu),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] must be positive and ordered")));
            }
        }
        if self.n_vertebrae[0] < 3 || self.n_vertebrae[0] > self.n_vertebrae[1] {
            return Err(Error::Config("n_vertebrae needs at least 3 vertebrae and an ordered range".into()));
        }
        if self.fov_height[0] == 0 || self.fov_height[0] > self.fov_height[1] {
            return Err(Error::Config("fov_height must be positive and ordered".into()));
        }
        if self.thickness_range[0] < 1.0 || self.thickness_range[1] > 7.0 {
            return Err(Error::Config("thickness_range must lie within [1, 7] mm".into()));
        }
        if self.width < 16 || self.depth < 16 {
            return Err(Error::Config("phantom images need at least 16 columns".into()));
        }
        if !(self.noise_hu >= 0.0 && self.lateral_shift >= 0.0) {
            return Err(Error::Config("noise_hu and lateral_shift must be non-negative".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box, half-open in every axis, with a constant intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub z: [f64; 2],
    pub ap: [f64; 2],
    pub lr: [f64; 2],
    pub hu: f32,
}

impl Box3 {
    fn index_range(range: [f64; 2], len: usize) -> std::ops::Range<usize> {
        let lo = range[0].max(0.0).ceil() as usize;
        let hi = (range[1].ceil().max(0.0) as usize).min(len);
        lo.min(hi)..hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub boxes: Vec<Box3>,
    pub height_mm: usize,
    pub width: usize,
    pub depth: usize,
    /// Superior-inferior extent of the L3 body.
    pub l3_z: [f64; 2],
    pub spine_lr: f64,
    pub body_ap: [f64; 2],
}

impl PhantomGeometry {
    /// Row of the L3 landmark (centre of the body, mid-pedicle level).
    pub fn y_true_mm(&self) -> f64 {
        ((self.l3_z[0] + self.l3_z[1]) / 2.0).round()
    }

    pub fn render_frontal_hu(&self) -> Array2<f32> {
        let mut out = Array2::from_elem((self.height_mm, self.width), SOFT_TISSUE_HU);
        for b in &self.boxes {
            for r in Box3::index_range(b.z, self.height_mm) {
                for c in Box3::index_range(b.lr, self.width) {
                    let v = &mut out[[r, c]];
                    *v = v.max(b.hu);
                }
            }
        }
        out
    }

    pub fn render_sagittal_hu(&self) -> Array2<f32> {
        let (lo, hi) = sagittal_band(self.width, 1.0, SAGITTAL_HALF_WIDTH_MM);
        let mut out = Array2::from_elem((self.height_mm, self.depth), SOFT_TISSUE_HU);
        for b in &self.boxes {
            let cols = Box3::index_range(b.lr, self.width);
            if cols.end <= lo || cols.start > hi || cols.is_empty() {
                continue;
            }
            for r in Box3::index_range(b.z, self.height_mm) {
                for c in Box3::index_range(b.ap, self.depth) {
                    let v = &mut out[[r, c]];
                    *v = v.max(b.hu);
                }
            }
        }
        out
    }

    /// Voxelize with slices every `thickness_mm` (slice `k` at `z = k * t`)
    /// and 1 mm in-plane voxels. Axis order is (IS, AP, LR).
    pub fn render_volume_hu(&self, thickness_mm: f64) -> Array3<f32> {
        let slices = ((self.height_mm as f64 / thickness_mm).round() as usize).max(1);
        let mut out = Array3::from_elem((slices, self.depth, self.width), SOFT_TISSUE_HU);
        for b in &self.boxes {
            let ap = Box3::index_range(b.ap, self.depth);
            let lr = Box3::index_range(b.lr, self.width);
            for k in 0..slices {
                let z = k as f64 * thickness_mm;
                if z < b.z[0] || z >= b.z[1] {
                    continue;
                }
                for j in ap.clone() {
                    for i in lr.clone() {
                        let v = &mut out[[k, j, i]];
                        *v = v.max(b.hu);
                    }
                }
            }
        }
        out
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn lr_pair(c: f64, inner: f64, outer: f64) -> [[f64; 2]; 2] {
    [[c + inner, c + outer], [c - outer, c - inner]]
}

/// Sample an anatomy; retries while the L3 body is not fully in view.
pub fn sample_geometry(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<PhantomGeometry> {
    cfg.validate()?;
    for _ in 0..cfg.max_retries {
        if let Some(g) = try_sample_geometry(cfg, rng) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!(
        "L3 fell outside the field of view in {} consecutive phantoms; widen fov_height",
        cfg.max_retries
    )))
}

fn try_sample_geometry(cfg: &PhantomConfig, rng: &mut impl Rng) -> Option<PhantomGeometry> {
    let height = rng.random_range(cfg.fov_height[0]..=cfg.fov_height[1]);
    let (w, d) = (cfg.width as f64, cfg.depth as f64);
    let c = (w / 2.0).floor() + uniform(rng, [-cfg.lateral_shift, cfg.lateral_shift]).round();
    let body_depth = uniform(rng, cfg.body_depth);
    let ap0 = (uniform(rng, [0.25, 0.35]) * d).round();
    let body_ap = [ap0, ap0 + body_depth];
    let bone = |rng: &mut dyn rand::RngCore| rng.random_range(cfg.bone_hu[0]..=cfg.bone_hu[1]) as f32;
    let mut boxes = Vec::new();

    let sacrum_top = uniform(rng, cfg.fov_below_sacrum).round();
    let sacrum_h = uniform(rng, cfg.sacrum_height).round();
    let sacrum_hw = uniform(rng, cfg.sacrum_half_width);
    let sacrum_hu = bone(rng);
    for step in 0..sacrum_h as usize {
        let z = sacrum_top - 1.0 - step as f64;
        let frac = step as f64 / sacrum_h;
        let hw = sacrum_hw * (1.0 - frac) + 6.0 * frac;
        let shift = 15.0 * frac;
        boxes.push(Box3 {
            z: [z, z + 1.0],
            ap: [ap0 + shift, ap0 + shift + body_depth * (1.0 - 0.5 * frac)],
            lr: [c - hw, c + hw],
            hu: sacrum_hu,
        });
    }
    let wing_top = sacrum_top + uniform(rng, [5.0, 30.0]).round();
    let wing_len = uniform(rng, [20.0, 35.0]);
    let wing_hu = bone(rng);
    for lr in lr_pair(c, sacrum_hw + 4.0, sacrum_hw + 4.0 + wing_len) {
        boxes.push(Box3 { z: [sacrum_top - 40.0, wing_top], ap: [ap0 - 10.0, ap0 + 25.0], lr, hu: wing_hu });
    }

    let n = rng.random_range(cfg.n_vertebrae[0]..=cfg.n_vertebrae[1]);
    let mut z = sacrum_top;
    let mut l3 = None;
    let mut widest: f64 = 0.0;
    for level in 0..n {
        let lumbar = level < 5;
        z += uniform(rng, if lumbar { cfg.lumbar_gap } else { cfg.thoracic_gap }).round();
        let h = uniform(rng, if lumbar { cfg.lumbar_height } else { cfg.thoracic_height }).round();
        let hw = uniform(rng, cfg.body_half_width) * if lumbar { 1.0 } else { 0.75 };
        widest = widest.max(hw);
        let mid = z + h / 2.0;
        let hu = bone(rng);
        let cortex = hu + rng.random_range(200.0..=300.0);
        boxes.push(Box3 { z: [z, z + h], ap: body_ap, lr: [c - hw, c + hw], hu });
        boxes.push(Box3 { z: [z, z + 2.0], ap: body_ap, lr: [c - hw, c + hw], hu: cortex });
        boxes.push(Box3 { z: [z + h - 2.0, z + h], ap: body_ap, lr: [c - hw, c + hw], hu: cortex });
        let pw = uniform(rng, cfg.pedicle_width);
        for lr in lr_pair(c, 0.35 * hw, 0.35 * hw + pw) {
            boxes.push(Box3 { z: [mid - 0.2 * h, mid + 0.2 * h], ap: [body_ap[1] - 6.0, body_ap[1] + 10.0], lr, hu: cortex });
        }
        boxes.push(Box3 { z: [z + 2.0, mid], ap: [body_ap[1] + 14.0, body_ap[1] + 40.0], lr: [c - 3.0, c + 3.0], hu });
        let (len, th, ap) = if lumbar {
            (
                uniform(rng, cfg.transverse_process_length),
                uniform(rng, cfg.transverse_process_thickness),
                [body_ap[1] + 4.0, body_ap[1] + 12.0],
            )
        } else {
            (uniform(rng, cfg.rib_length), 5.0, [body_ap[1] - 10.0, body_ap[1] + 10.0])
        };
        let th = th.min(h - 4.0);
        for lr in lr_pair(c, hw, hw + len) {
            boxes.push(Box3 { z: [mid - th / 2.0, mid + th / 2.0], ap, lr, hu });
        }
        if level == 2 {
            l3 = Some([z, z + h]);
        }
        z += h;
        if z > height as f64 + 20.0 {
            break;
        }
    }
    let l3 = l3?;
    if l3[0] < 0.0 || l3[1] > height as f64 {
        return None;
    }

    let blobs = rng.random_range(0..=cfg.max_blobs);
    for _ in 0..blobs {
        let size = [uniform(rng, [8.0, 25.0]), uniform(rng, [8.0, 25.0])];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let inner = widest + 8.0;
        let reach = (w / 2.0 - inner - size[1]).max(0.0);
        let lr0 = c + side * (inner + uniform(rng, [0.0, reach]));
        let lr = if side > 0.0 { [lr0, lr0 + size[1]] } else { [lr0 - size[1], lr0] };
        let z0 = uniform(rng, [0.0, height as f64 - size[0]]);
        let ap_hi = (ap0 - 2.0).max(6.0);
        let ap_lo = uniform(rng, [0.0, (ap_hi - 4.0).max(0.0)]);
        boxes.push(Box3 {
            z: [z0, z0 + size[0]],
            ap: [ap_lo, ap_hi],
            lr,
            hu: rng.random_range(150.0..=350.0) as f32,
        });
    }

    Some(PhantomGeometry { boxes, height_mm: height, width: cfg.width, depth: cfg.depth, l3_z: l3, spine_lr: c, body_ap })
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub frontal: MipImage,
    pub sagittal: MipImage,
    pub y_true_mm: f64,
    pub thickness_mm: f64,
    pub geometry: PhantomGeometry,
}

fn add_noise(px: &mut Array2<f32>, sd: f64, rng: &mut impl Rng) {
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("validated noise level");
        px.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }
}

fn finish_view(hu: Array2<f32>, view: View, id: &str, thickness: f64, cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<MipImage> {
    let mut pixels = hu;
    add_noise(&mut pixels, cfg.noise_hu, rng);
    let img = MipImage {
        pixels,
        spacing: [1.0, 1.0],
        domain: IntensityDomain::Hu,
        view,
        source_id: id.to_string(),
        slice_thickness_mm: Some(thickness),
    };
    Ok(threshold_and_quantize(&simulate_thickness(&img, thickness)?))
}

/// Render a phantom directly as its two preprocessed projections.
pub fn generate_phantom(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<Phantom> {
    generate_phantom_with_id(cfg, rng, "phantom")
}

fn generate_phantom_with_id(cfg: &PhantomConfig, rng: &mut impl Rng, id: &str) -> Result<Phantom> {
    let geometry = sample_geometry(cfg, rng)?;
    let thickness_mm = uniform(rng, cfg.thickness_range);
    let frontal = finish_view(geometry.render_frontal_hu(), View::Frontal, id, thickness_mm, cfg, rng)?;
    let sagittal = finish_view(geometry.render_sagittal_hu(), View::SagittalRestricted, id, thickness_mm, cfg, rng)?;
    Ok(Phantom { frontal, sagittal, y_true_mm: geometry.y_true_mm(), thickness_mm, geometry })
}

/// Voxelize a phantom as a CT volume in HU.
pub fn generate_phantom_volume(cfg: &PhantomConfig, rng: &mut impl Rng, id: &str) -> Result<(Volume3D, f64)> {
    let geometry = sample_geometry(cfg, rng)?;
    let thickness_mm = uniform(rng, cfg.thickness_range);
    let mut data = geometry.render_volume_hu(thickness_mm);
    if cfg.noise_hu > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_hu).expect("validated noise level");
        data.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }
    let vol = Volume3D::new(data, Spacing::new(thickness_mm, 1.0, 1.0), id)?;
    Ok((vol, geometry.y_true_mm()))
}

/// Generator for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:05}")
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub id: String,
    pub phantom: Phantom,
}

impl PhantomSample {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            image_id: self.id.clone(),
            annotator: "phantom".into(),
            y_mm: self.phantom.y_true_mm,
            ambiguous: false,
        }
    }
}

/// `n` independent phantoms; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<PhantomSample>> {
    (0..n)
        .map(|i| {
            let id = phantom_id(i);
            let phantom = generate_phantom_with_id(cfg, &mut sample_rng(seed, i), &id)?;
            Ok(PhantomSample { id, phantom })
        })
        .collect()
}

/// Write `mips/<id>_<view>.png` with sidecars and `annotations.csv` under `dir`.
pub fn write_dataset(samples: &[PhantomSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mips = dir.join("mips");
    fs::create_dir_all(&mips).map_err(|e| Error::io(&mips, e))?;
    for s in samples {
        crate::mip::save_mip(&s.phantom.frontal, &mips)?;
        crate::mip::save_mip(&s.phantom.sagittal, &mips)?;
    }
    let csv_path = dir.join("annotations.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let annotations: Vec<Annotation> = samples.iter().map(PhantomSample::annotation).collect();
    write_annotations(std::io::BufWriter::new(file), &annotations)?;
    Ok(csv_path)
}

/// Write `n` phantom volumes as `volumes/<id>.nii.gz` plus `annotations.csv`.
pub fn write_volume_dataset(n: usize, cfg: &PhantomConfig, seed: u64, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut paths = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let id = phantom_id(i);
        let (vol, y) = generate_phantom_volume(cfg, &mut sample_rng(seed, i), &id)?;
        let path = vol_dir.join(format!("{id}.nii.gz"));
        save_volume(&vol, &path)?;
        paths.push(path);
        annotations.push(Annotation { image_id: id, annotator: "phantom".into(), y_mm: y, ambiguous: false });
    }
    let csv_path = dir.join("annotations.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_annotations(std::io::BufWriter::new(file), &annotations)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mip::preprocess_volume;
    use crate::targets::read_annotations;

    /// Rule-based reader: find the spine column, then count bright runs of
    /// rows upward from the inferior edge (sacrum, L5, L4, L3).
    fn oracle_l3(frontal: &MipImage) -> Option<f64> {
        let px = &frontal.pixels;
        let (h, w) = px.dim();
        let col_score: Vec<usize> = (0..w).map(|c| (0..h).filter(|&r| px[[r, c]] > -105.0).count()).collect();
        let spine = (0..w).max_by_key(|&c| (col_score[c], std::cmp::Reverse(c)))?;
        let lo = spine.saturating_sub(3);
        let hi = (spine + 3).min(w - 1);
        let profile: Vec<f32> =
            (0..h).map(|r| (lo..=hi).map(|c| px[[r, c]]).sum::<f32>() / (hi - lo + 1) as f32).collect();
        let mut runs = Vec::new();
        let mut start = None;
        for (r, &v) in profile.iter().enumerate() {
            match (v > -105.0, start) {
                (true, None) => start = Some(r),
                (false, Some(s)) => {
                    runs.push((s, r - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, h - 1));
        }
        runs.get(3).map(|&(a, b)| (a + b) as f64 / 2.0)
    }

    #[test]
    fn same_seed_gives_identical_phantom() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, &mut sample_rng(7, 3)).unwrap();
        let b = generate_phantom(&cfg, &mut sample_rng(7, 3)).unwrap();
        assert_eq!(a.frontal, b.frontal);
        assert_eq!(a.sagittal, b.sagittal);
        assert_eq!(a.y_true_mm, b.y_true_mm);
        let c = generate_phantom(&cfg, &mut sample_rng(7, 4)).unwrap();
        assert_ne!(a.frontal, c.frontal);
    }

    #[test]
    fn label_lies_on_bone_in_both_views() {
        let cfg = PhantomConfig::default();
        for i in 0..100 {
            let p = generate_phantom(&cfg, &mut sample_rng(11, i)).unwrap();
            let y = p.y_true_mm as usize;
            let g = &p.geometry;
            assert!(g.l3_z[0] < p.y_true_mm && p.y_true_mm < g.l3_z[1]);
            let fc = g.spine_lr as usize;
            let sc = ((g.body_ap[0] + g.body_ap[1]) / 2.0) as usize;
            assert!(p.frontal.pixels[[y, fc]] > -100.0, "sample {i} frontal {}", p.frontal.pixels[[y, fc]]);
            assert!(p.sagittal.pixels[[y, sc]] > -100.0, "sample {i} sagittal {}", p.sagittal.pixels[[y, sc]]);
        }
    }

    #[test]
    fn generated_images_are_valid_preprocessed_mips() {
        let cfg = PhantomConfig::default();
        for i in 0..100 {
            let p = generate_phantom(&cfg, &mut sample_rng(5, i)).unwrap();
            p.frontal.validate_preprocessed().unwrap();
            p.sagittal.validate_preprocessed().unwrap();
            assert_eq!(p.frontal.height(), p.sagittal.height());
            assert!(p.y_true_mm < p.frontal.height() as f64);
        }
    }

    #[test]
    fn counting_rule_recovers_every_label() {
        let cfg = PhantomConfig::default();
        for i in 0..100 {
            let p = generate_phantom(&cfg, &mut sample_rng(13, i)).unwrap();
            let found = oracle_l3(&p.frontal).unwrap_or_else(|| panic!("sample {i}: fewer than four runs"));
            assert!(
                (found - p.y_true_mm).abs() <= 3.0,
                "sample {i}: oracle {found} vs {} (t = {:.2})",
                p.y_true_mm,
                p.thickness_mm
            );
        }
    }

    #[test]
    fn thickness_histogram_spans_range() {
        let cfg = PhantomConfig { fov_height: [200, 260], n_vertebrae: [6, 8], width: 32, depth: 32, ..Default::default() };
        let mut bins = [0usize; 4];
        for i in 0..500 {
            let mut rng = sample_rng(3, i);
            sample_geometry(&cfg, &mut rng).unwrap();
            let t = uniform(&mut rng, cfg.thickness_range);
            assert!((1.0..=5.0).contains(&t));
            bins[((t - 1.0) as usize).min(3)] += 1;
        }
        assert!(bins.iter().all(|&b| b > 80), "{bins:?}");
    }

    #[test]
    fn impossible_fov_is_an_error() {
        let cfg = PhantomConfig { fov_height: [40, 50], ..Default::default() };
        assert!(matches!(generate_phantom(&cfg, &mut sample_rng(0, 0)), Err(Error::Config(_))));
        let bad = PhantomConfig { lumbar_height: [30.0, 20.0], ..Default::default() };
        assert!(generate_phantom(&bad, &mut sample_rng(0, 0)).is_err());
    }

    #[test]
    fn volume_projection_matches_direct_rendering() {
        let cfg = PhantomConfig { noise_hu: 0.0, thickness_range: [1.0, 1.0], ..Default::default() };
        let g = sample_geometry(&cfg, &mut sample_rng(2, 0)).unwrap();
        let vol = Volume3D::new(g.render_volume_hu(1.0), Spacing::new(1.0, 1.0, 1.0), "v").unwrap();
        let (f, s) = preprocess_volume(&vol).unwrap();
        let hu = |a: Array2<f32>, view| MipImage {
            pixels: a,
            spacing: [1.0, 1.0],
            domain: IntensityDomain::Hu,
            view,
            source_id: "v".into(),
            slice_thickness_mm: Some(1.0),
        };
        assert_eq!(f.pixels, threshold_and_quantize(&hu(g.render_frontal_hu(), View::Frontal)).pixels);
        assert_eq!(s.pixels, threshold_and_quantize(&hu(g.render_sagittal_hu(), View::SagittalRestricted)).pixels);
    }

    #[test]
    fn volume_with_given_thickness_has_expected_extent() {
        let cfg = PhantomConfig { fov_height: [200, 200], thickness_range: [2.0, 2.0], width: 64, depth: 64, ..Default::default() };
        let (vol, y) = generate_phantom_volume(&cfg, &mut sample_rng(1, 0), "v").unwrap();
        assert_eq!(vol.extents().0, 100);
        let (f, s) = preprocess_volume(&vol).unwrap();
        assert_eq!((f.height(), s.height()), (200, 200));
        assert!(f.pixels.row(y as usize).iter().any(|&v| v > -100.0));
    }

    #[test]
    fn empty_dataset_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(0, &PhantomConfig::default(), 1).unwrap();
        let csv = write_dataset(&samples, dir.path()).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(text.trim(), "image_id,annotator,y_mm,ambiguous");
        assert!(read_annotations(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig { width: 64, depth: 64, ..Default::default() };
        let samples = generate_dataset(3, &cfg, 9).unwrap();
        let csv = write_dataset(&samples, dir.path()).unwrap();
        let anns = read_annotations(fs::File::open(csv).unwrap()).unwrap();
        assert_eq!(anns.len(), 3);
        for (s, a) in samples.iter().zip(&anns) {
            assert_eq!(a.y_mm, s.phantom.y_true_mm);
            let loaded = crate::mip::load_mip(dir.path().join("mips").join(format!("{}_frontal.png", s.id))).unwrap();
            assert_eq!(loaded.pixels, s.phantom.frontal.pixels);
        }
    }
}
