//! File-backed annotation store: one JSON file per image under
//! `<root>/annotations/`, replaced atomically on every write.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use mipslice_core::inference::PredictionResult;
use mipslice_core::mip::{read_sidecar, View};
use mipslice_core::targets::Annotation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("no annotation by {annotator:?} for image {image_id:?}")]
    NoAnnotation { image_id: String, annotator: String },
    #[error("no prediction for image {0:?}")]
    NoPrediction(String),
    #[error("{0}")]
    OutOfRange(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// One annotator's click on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator: String,
    pub y_mm: f64,
    pub ambiguous: bool,
    /// RFC 3339 time at which the server stored the record.
    pub timestamp: String,
}

impl From<&AnnotationRecord> for Annotation {
    fn from(r: &AnnotationRecord) -> Self {
        Annotation { image_id: r.image_id.clone(), annotator: r.annotator.clone(), y_mm: r.y_mm, ambiguous: r.ambiguous }
    }
}

/// Listing entry for `GET /api/images`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub height_mm: f64,
    pub views: Vec<View>,
    pub annotators: Vec<String>,
    pub annotated: bool,
    pub has_prediction: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageFile {
    image_id: String,
    records: Vec<AnnotationRecord>,
}

/// Ids are restricted to a filename-safe alphabet so they can never escape
/// the data directory.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl Store {
    /// Open `root`, which must contain `mips/`; `annotations/` is created on demand.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let mips = root.join("mips");
        if !mips.is_dir() {
            return Err(StoreError::Io {
                path: mips,
                source: io::Error::new(io::ErrorKind::NotFound, "data directory has no mips/ folder"),
            });
        }
        let ann = root.join("annotations");
        fs::create_dir_all(&ann).map_err(io_err(&ann))?;
        Ok(Store { root, locks: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn annotation_file(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.json"))
    }

    fn prediction_file(&self, id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{id}.json"))
    }

    pub fn mip_path(&self, id: &str, view: View) -> Option<PathBuf> {
        if !valid_id(id) {
            return None;
        }
        let p = self.root.join("mips").join(format!("{id}_{view}.png"));
        p.is_file().then_some(p)
    }

    /// Sorted ids of every image with at least one MIP on disk.
    pub fn image_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("mips");
        let mut ids = BTreeSet::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(stem) = name.strip_suffix(".png") else { continue };
            for view in [View::Frontal, View::SagittalRestricted] {
                if let Some(id) = stem.strip_suffix(&format!("_{view}")) {
                    if valid_id(id) {
                        ids.insert(id.to_string());
                    }
                }
            }
        }
        Ok(ids.into_iter().collect())
    }

    fn views(&self, id: &str) -> Vec<View> {
        [View::Frontal, View::SagittalRestricted].into_iter().filter(|v| self.mip_path(id, *v).is_some()).collect()
    }

    /// Image height in mm from the MIP sidecar; unknown ids are an error.
    pub fn height_mm(&self, id: &str) -> Result<f64, StoreError> {
        let path = self
            .views(id)
            .first()
            .and_then(|v| self.mip_path(id, *v))
            .ok_or_else(|| StoreError::UnknownImage(id.to_string()))?;
        read_sidecar(&path)
            .map(|s| s.height_mm)
            .map_err(|e| StoreError::Corrupt { path, message: e.to_string() })
    }

    /// All records for an image, sorted by annotator. Lock-free: files are
    /// only ever replaced by rename, so a read sees a complete version.
    pub fn records(&self, id: &str) -> Result<Vec<AnnotationRecord>, StoreError> {
        if self.views(id).is_empty() {
            return Err(StoreError::UnknownImage(id.to_string()));
        }
        self.read_records(id)
    }

    fn read_records(&self, id: &str) -> Result<Vec<AnnotationRecord>, StoreError> {
        let path = self.annotation_file(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let file: ImageFile =
            serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
        if file.image_id != id {
            return Err(StoreError::Corrupt { path, message: format!("holds records for {:?}", file.image_id) });
        }
        Ok(file.records)
    }

    pub fn record(&self, id: &str, annotator: &str) -> Result<AnnotationRecord, StoreError> {
        self.records(id)?.into_iter().find(|r| r.annotator == annotator).ok_or_else(|| StoreError::NoAnnotation {
            image_id: id.to_string(),
            annotator: annotator.to_string(),
        })
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Insert or replace the record of `(image_id, annotator)`. Writes to the
    /// same image are serialized; the last writer wins.
    pub async fn put(
        self: &Arc<Self>,
        id: &str,
        annotator: &str,
        y_mm: f64,
        ambiguous: bool,
    ) -> Result<AnnotationRecord, StoreError> {
        let height = self.height_mm(id)?;
        if !y_mm.is_finite() || y_mm < 0.0 || y_mm > height {
            return Err(StoreError::OutOfRange(format!("y_mm {y_mm} outside [0, {height}] for image {id:?}")));
        }
        let record = AnnotationRecord {
            image_id: id.to_string(),
            annotator: annotator.to_string(),
            y_mm,
            ambiguous,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let lock = self.lock_for(id);
        let _guard = lock.lock().await;
        let store = Arc::clone(self);
        let rec = record.clone();
        tokio::task::spawn_blocking(move || {
            let mut records = store.read_records(&rec.image_id)?;
            records.retain(|r| r.annotator != rec.annotator);
            records.push(rec.clone());
            records.sort_by(|a, b| a.annotator.cmp(&b.annotator));
            store.write_atomic(&rec.image_id, &ImageFile { image_id: rec.image_id.clone(), records })
        })
        .await
        .expect("annotation writer panicked")?;
        Ok(record)
    }

    fn write_atomic(&self, id: &str, file: &ImageFile) -> Result<(), StoreError> {
        let target = self.annotation_file(id);
        let dir = target.parent().expect("annotation file has a parent");
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        let body = serde_json::to_vec_pretty(file).expect("records serialize");
        tmp.write_all(&body).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(&target))?;
        tmp.persist(&target).map_err(|e| StoreError::Io { path: target.clone(), source: e.error })?;
        Ok(())
    }

    pub fn prediction(&self, id: &str) -> Result<PredictionResult, StoreError> {
        if self.views(id).is_empty() {
            return Err(StoreError::UnknownImage(id.to_string()));
        }
        let path = self.prediction_file(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NoPrediction(id.to_string())),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path, message: e.to_string() })
    }

    pub fn summaries(&self) -> Result<Vec<ImageSummary>, StoreError> {
        self.image_ids()?
            .into_iter()
            .map(|id| {
                let annotators: Vec<String> = self.read_records(&id)?.into_iter().map(|r| r.annotator).collect();
                Ok(ImageSummary {
                    height_mm: self.height_mm(&id)?,
                    views: self.views(&id),
                    annotated: !annotators.is_empty(),
                    has_prediction: self.prediction_file(&id).is_file(),
                    annotators,
                    id,
                })
            })
            .collect()
    }

    /// Every stored record in the training-pipeline annotation format,
    /// ordered by image id then annotator.
    pub fn export(&self) -> Result<Vec<Annotation>, StoreError> {
        let mut by_image = BTreeMap::new();
        for id in self.image_ids()? {
            by_image.insert(id.clone(), self.read_records(&id)?);
        }
        Ok(by_image.values().flatten().map(Annotation::from).collect())
    }
}
