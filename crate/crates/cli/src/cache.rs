//! Content-addressed cache of preprocessed MIP pairs, enabled by setting
//! `MIPSLICE_CACHE` to a directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mipslice_core::mip::{load_mip, preprocess_volume, save_mip, MipImage, View};
use mipslice_core::volume_io::{load_volume, Volume3D};
use sha2::{Digest, Sha256};

pub const CACHE_ENV: &str = "MIPSLICE_CACHE";

/// Bumped whenever the preprocessing output for a given volume changes.
const PIPELINE_VERSION: &str = "mip-v1";

fn cache_root() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Hash of the volume file and, for raw volumes, its data file.
fn content_key(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(PIPELINE_VERSION);
    h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    let raw = path.with_extension("raw");
    if path.extension().is_some_and(|e| e == "json") && raw.is_file() {
        h.update(fs::read(&raw).with_context(|| format!("reading {}", raw.display()))?);
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Load a volume and produce its (frontal, sagittal) MIPs, reusing cached
/// projections when the cache is enabled.
pub fn volume_and_mips(path: &Path) -> Result<(Volume3D, MipImage, MipImage)> {
    let vol = load_volume(path).with_context(|| format!("loading volume {}", path.display()))?;
    let Some(root) = cache_root() else {
        let (f, s) = preprocess_volume(&vol)?;
        return Ok((vol, f, s));
    };
    let dir = root.join(content_key(path)?);
    let load = |view: View| -> Result<MipImage> {
        let mut img = load_mip(dir.join(format!("entry_{view}.png")))?;
        img.source_id = vol.id().to_string();
        Ok(img)
    };
    if let (Ok(f), Ok(s)) = (load(View::Frontal), load(View::SagittalRestricted)) {
        log::debug!("cache hit for {}", path.display());
        return Ok((vol, f, s));
    }
    let (f, s) = preprocess_volume(&vol)?;
    for img in [&f, &s] {
        let mut entry = img.clone();
        entry.source_id = "entry".into();
        save_mip(&entry, &dir).with_context(|| format!("writing cache entry in {}", dir.display()))?;
    }
    Ok((vol, f, s))
}
