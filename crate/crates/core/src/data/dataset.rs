//! On-disk labeled datasets: one raw-f32 file per image plus a JSON manifest
//! listing `{path, label}` entries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::image::{decode_image, ImageFormat};
use crate::data::synthetic::{generate_synthetic_dataset, LabeledImage, SyntheticSpec};
use crate::data::DataError;

pub const MANIFEST_NAME: &str = "manifest.json";

/// One manifest row; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

pub type Manifest = Vec<ManifestEntry>;

/// Generates the synthetic dataset and writes it under `dir`.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest, DataError> {
    let images = generate_synthetic_dataset(spec)?;
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(images.len());
    for (i, li) in images.iter().enumerate() {
        let path = format!("img_{i:05}_c{}.raw", li.label);
        fs::write(dir.join(&path), li.image.encode(ImageFormat::RawF32))?;
        manifest.push(ManifestEntry { path, label: li.label });
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

/// Accepts either the dataset directory or the manifest path itself.
pub fn load_dataset(path: &Path) -> Result<(Manifest, Vec<LabeledImage>), DataError> {
    let (dir, manifest_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_NAME))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.is_empty() {
        return Err(DataError::InvalidArgument("manifest lists no images".into()));
    }
    let mut images = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let image = decode_image(&fs::read(dir.join(&e.path))?, ImageFormat::RawF32)?;
        images.push(LabeledImage { image, label: e.label });
    }
    Ok((manifest, images))
}

/// Number of classes implied by the labels, `max + 1`.
pub fn class_count(images: &[LabeledImage]) -> usize {
    images.iter().map(|li| li.label + 1).max().unwrap_or(0)
}
