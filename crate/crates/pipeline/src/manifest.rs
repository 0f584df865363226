//! Image datasets laid out one directory per identity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advstyle_core::FaceImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub identity: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub entries: Vec<ManifestEntry>,
}

/// How [`ingest`] reads a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Reject the dataset when image resolutions differ.
    pub strict: bool,
    /// Expected `[height, width]`. Defaults to the most common resolution.
    pub resolution: Option<[usize; 2]>,
    /// Lowercase file extensions accepted as images.
    pub extensions: Vec<String>,
}

impl Default for Layout {
    fn default() -> Self {
        Self { strict: false, resolution: None, extensions: vec!["png".into()] }
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Scans `root/<identity>/<image>` into a manifest sorted by identity, then
/// file name. Every image is decoded once to validate it.
pub fn ingest(root: impl AsRef<Path>, layout: &Layout) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    let mut sizes: Vec<(ManifestEntry, [usize; 2])> = Vec::new();
    for dir in sorted_dir(root)? {
        if !dir.is_dir() {
            continue;
        }
        let identity = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for file in sorted_dir(&dir)? {
            let ext = file.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
            if !file.is_file() || !layout.extensions.contains(&ext) {
                continue;
            }
            let image = FaceImage::load(&file)?;
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            let entry = ManifestEntry { identity: identity.clone(), path: rel };
            sizes.push((entry.clone(), [image.height(), image.width()]));
            entries.push(entry);
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("no images found under {}", root.display())));
    }

    let resolution = layout.resolution.unwrap_or_else(|| {
        let mut counts: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for (_, r) in &sizes {
            *counts.entry(*r).or_default() += 1;
        }
        let max = counts.values().copied().max().unwrap_or(0);
        counts.into_iter().find(|(_, c)| *c == max).map(|(r, _)| r).unwrap_or([0, 0])
    });
    let offenders: Vec<String> =
        sizes.iter().filter(|(_, r)| *r != resolution).map(|(e, r)| format!("{} ({}x{})", e.path.display(), r[0], r[1])).collect();
    if !offenders.is_empty() {
        if layout.strict {
            return Err(Error::MixedResolutions { expected: format!("{}x{}", resolution[0], resolution[1]), offenders });
        }
        log::warn!("{} images differ from {}x{}", offenders.len(), resolution[0], resolution[1]);
    }

    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    Ok(DatasetManifest { name, root: root.to_path_buf(), resolution, entries })
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<FaceImage> {
        Ok(FaceImage::load(self.resolve(entry))?)
    }

    /// Identities in sorted order.
    pub fn identities(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.identity.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Parses a manifest and checks that every referenced file still exists.
    pub fn from_toml(text: &str) -> Result<Self> {
        let manifest: Self = toml::from_str(text).map_err(|e| Error::Parse { what: "manifest".into(), message: e.to_string() })?;
        if manifest.entries.is_empty() {
            return Err(Error::invalid("manifest has no entries"));
        }
        for entry in &manifest.entries {
            let path = manifest.resolve(entry);
            if !path.is_file() {
                return Err(Error::MissingFile(path.display().to_string()));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }
}
