//! CT volumes on disk and in memory.
//!
//! Volumes are held as `(slice, row, column)` grids of Hounsfield units where
//! axis 0 runs inferior to superior, axis 1 anterior to posterior and axis 2
//! left to right. Millimetre positions along axis 0 are measured from the
//! centre of the inferior-most slice.
//!
//! Two on-disk formats are supported: NIfTI-1 (`.nii`, `.nii.gz`) and a raw
//! fallback consisting of a flat little-endian `f32` file (`.raw`) next to a
//! JSON sidecar (`.json`) that records shape, spacing, dtype and axis order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel size in millimetres along each volume axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    /// Axis 0: slice thickness (inferior→superior).
    pub z: f64,
    /// Axis 1: anterior→posterior.
    pub y: f64,
    /// Axis 2: left→right.
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Self {
        Self { z, y, x }
    }

    pub fn isotropic(s: f64) -> Self {
        Self::new(s, s, s)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("z", self.z), ("y", self.y), ("x", self.x)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Metadata(format!("spacing {name} = {v} must be positive and finite")));
            }
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f32>,
    spacing: Spacing,
    id: String,
}

impl Volume3D {
    pub fn new(data: Array3<f32>, spacing: Spacing, id: impl Into<String>) -> Result<Self> {
        spacing.validate()?;
        if data.shape().contains(&0) {
            return Err(Error::Format(format!("volume extents {:?} must all be >= 1", data.shape())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("volume contains non-finite intensities".into()));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(Self { data, spacing, id: id.into() })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// `(slices, rows, columns)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Craniocaudal coverage: slice count times slice thickness.
    pub fn height_mm(&self) -> f64 {
        self.data.dim().0 as f64 * self.spacing.z
    }
}

/// Nearest slice to a millimetre position along axis 0 (half-up rounding,
/// clamped to the volume).
pub fn slice_index_for_y(vol: &Volume3D, y_mm: f64) -> Result<usize> {
    slice_index_for_position(y_mm, vol.spacing.z, vol.extents().0)
}

pub(crate) fn slice_index_for_position(y_mm: f64, thickness: f64, slices: usize) -> Result<usize> {
    if !y_mm.is_finite() || y_mm < 0.0 {
        return Err(Error::Domain(format!("slice position {y_mm} mm must be non-negative")));
    }
    let idx = (y_mm / thickness + 0.5).floor() as usize;
    Ok(idx.min(slices.saturating_sub(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn detect_format(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".json") || name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(Error::Format(format!("{}: expected .nii, .nii.gz, .raw or .json", path.display())))
    }
}

/// Volume identifier derived from a file name (extensions stripped).
pub fn volume_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".json", ".raw"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name.to_string()
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Nifti => load_nifti(path),
        Format::Raw => load_raw(path),
    }
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Nifti => save_nifti(vol, path),
        Format::Raw => save_raw(vol, path),
    }
}

/// JSON sidecar of the raw fallback format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub axis_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

const AXIS_ORDER: &str = "IS,AP,LR";

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn load_raw(path: &Path) -> Result<Volume3D> {
    let (meta_path, data_path) = raw_paths(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RawSidecar = serde_json::from_str(&text)?;
    if meta.axis_order != AXIS_ORDER {
        return Err(Error::Format(format!(
            "axis order {:?} not supported, expected {AXIS_ORDER:?}",
            meta.axis_order
        )));
    }
    let spacing = Spacing::new(meta.spacing[0], meta.spacing[1], meta.spacing[2]);
    spacing.validate()?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let count: usize = meta.shape.iter().product();
    let values: Vec<f32> = match meta.dtype.as_str() {
        "f32" => decode(&bytes, count, 4, |c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))?,
        "i16" => decode(&bytes, count, 2, |c| i16::from_le_bytes([c[0], c[1]]) as f32)?,
        other => return Err(Error::Format(format!("raw dtype {other:?} not supported"))),
    };
    let data = Array3::from_shape_vec(meta.shape, values)
        .map_err(|e| Error::Format(format!("raw payload: {e}")))?;
    let id = meta.id.unwrap_or_else(|| volume_id_from_path(path));
    Volume3D::new(data, spacing, id)
}

fn decode(bytes: &[u8], count: usize, width: usize, f: impl Fn(&[u8]) -> f32) -> Result<Vec<f32>> {
    if bytes.len() != count * width {
        return Err(Error::Format(format!(
            "raw payload has {} bytes, shape requires {}",
            bytes.len(),
            count * width
        )));
    }
    Ok(bytes.chunks_exact(width).map(f).collect())
}

fn save_raw(vol: &Volume3D, path: &Path) -> Result<()> {
    let (meta_path, data_path) = raw_paths(path);
    let (d0, d1, d2) = vol.extents();
    let meta = RawSidecar {
        shape: [d0, d1, d2],
        spacing: vol.spacing.as_array(),
        dtype: "f32".into(),
        axis_order: AXIS_ORDER.into(),
        id: Some(vol.id.clone()),
    };
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in vol.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

/// For each NIfTI voxel axis: the volume axis it maps to and whether it runs
/// opposite to that axis.
fn nifti_axis_map(header: &NiftiHeader) -> [(usize, bool); 3] {
    // world x (right) -> axis 2, world y (anterior) -> axis 1 reversed,
    // world z (superior) -> axis 0
    let canonical = [(2, false), (1, true), (0, false)];
    if header.sform_code <= 0 {
        return canonical;
    }
    let rows = [header.srow_x, header.srow_y, header.srow_z];
    let mut map = canonical;
    let mut used = [false; 3];
    for (voxel_axis, slot) in map.iter_mut().enumerate() {
        let (world, coef) = (0..3)
            .map(|w| (w, rows[w][voxel_axis]))
            .filter(|(w, _)| !used[*w])
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap_or((voxel_axis, 1.0));
        used[world] = true;
        let (axis, reversed_when_positive) = match world {
            0 => (2, false),
            1 => (1, true),
            _ => (0, false),
        };
        *slot = (axis, (coef >= 0.0) == reversed_when_positive);
    }
    map
}

fn load_nifti(path: &Path) -> Result<Volume3D> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::Nifti(other),
    })?;
    let header = obj.header().clone();
    let rank = header.dim[0] as usize;
    let dims = &header.dim[1..=rank.min(7)];
    let squeezed = dims.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
    if rank < 3 || squeezed > 3 {
        return Err(Error::Format(format!("expected a 3D volume, header has dims {dims:?}")));
    }
    let raw: ArrayD<f32> = obj.into_volume().into_ndarray::<f32>()?;
    let shape3 = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let raw = raw
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(shape3.to_vec())
        .map_err(|e| Error::Format(format!("volume payload: {e}")))?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(format!("volume payload: {e}")))?;

    let map = nifti_axis_map(&header);
    let pix = [header.pixdim[1] as f64, header.pixdim[2] as f64, header.pixdim[3] as f64];
    let mut permutation = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    for (voxel_axis, &(axis, _)) in map.iter().enumerate() {
        permutation[axis] = voxel_axis;
        spacing[axis] = pix[voxel_axis].abs();
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Metadata(format!("pixdim {pix:?} contains zero or invalid spacing")));
    }
    let mut data = raw.permuted_axes(permutation);
    for &(axis, flip) in &map {
        if flip {
            data.invert_axis(Axis(axis));
        }
    }
    Volume3D::new(
        data.as_standard_layout().into_owned(),
        Spacing::new(spacing[0], spacing[1], spacing[2]),
        volume_id_from_path(path),
    )
}

fn save_nifti(vol: &Volume3D, path: &Path) -> Result<()> {
    let s = vol.spacing;
    let header = NiftiHeader {
        pixdim: [1.0, s.x as f32, s.y as f32, s.z as f32, 1.0, 1.0, 1.0, 1.0],
        sform_code: 1,
        qform_code: 0,
        srow_x: [s.x as f32, 0.0, 0.0, 0.0],
        srow_y: [0.0, -(s.y as f32), 0.0, 0.0],
        srow_z: [0.0, 0.0, s.z as f32, 0.0],
        xyzt_units: 2, // millimetres
        ..NiftiHeader::default()
    };
    // voxel axes (i, j, k) = (left→right, anterior→posterior, inferior→superior)
    let view = vol.data.view().permuted_axes([2, 1, 0]);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory missing")));
        }
    }
    WriterOptions::new(path).reference_header(&header).write_nifti(&view).map_err(|e| match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::Nifti(other),
    })
}
