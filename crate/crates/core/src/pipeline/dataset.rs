use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::TrainingImage;
use crate::error::{Error, Result};
use crate::markers::MarkerSet;
use crate::postproc::BinaryMask;
use crate::tensor::FeatureMap;

pub const IMAGES_DIR: &str = "images";
pub const MARKERS_DIR: &str = "markers";
pub const GT_DIR: &str = "gt";

/// Problems found while indexing one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum EntryIssue {
    /// Ground-truth mask size differs from the image; excluded from metrics.
    GtSizeMismatch,
    /// Ground truth could not be read.
    GtUnreadable(String),
    /// Marker file is malformed or out of bounds; the image is not trainable.
    InvalidMarkers(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// File stem; unique within the dataset.
    pub id: String,
    /// Image file name inside `images/`.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub has_markers: bool,
    pub has_gt: bool,
    pub issues: Vec<EntryIssue>,
}

impl DatasetEntry {
    pub fn trainable(&self) -> bool {
        self.has_markers && !self.issues.iter().any(|i| matches!(i, EntryIssue::InvalidMarkers(_)))
    }

    pub fn evaluable(&self) -> bool {
        self.has_gt
            && !self
                .issues
                .iter()
                .any(|i| matches!(i, EntryIssue::GtSizeMismatch | EntryIssue::GtUnreadable(_)))
    }
}

/// Index of a dataset directory: `images/*.png`, optional
/// `markers/<id>.json` and `gt/<id>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(skip)]
    pub root: PathBuf,
    /// Sorted by id.
    pub entries: Vec<DatasetEntry>,
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Scans `root`. A missing `images/` directory is fatal; every per-image
/// problem is recorded on the entry instead.
pub fn ingest(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref().to_path_buf();
    let images_dir = root.join(IMAGES_DIR);
    if !images_dir.is_dir() {
        return Err(Error::NotFound(format!("{IMAGES_DIR}/ directory under dataset root")));
    }
    let mut entries = Vec::new();
    for item in std::fs::read_dir(&images_dir)? {
        let path = item?.path();
        if !path.is_file() || !is_png(&path) {
            continue;
        }
        let (Some(stem), Some(file)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.file_name().and_then(|s| s.to_str()),
        ) else {
            log::warn!("skipping non-UTF-8 file name {}", path.display());
            continue;
        };
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut entry = DatasetEntry {
            id: stem.to_string(),
            file: file.to_string(),
            width: w as usize,
            height: h as usize,
            has_markers: false,
            has_gt: false,
            issues: Vec::new(),
        };
        let marker_path = root.join(MARKERS_DIR).join(format!("{stem}.json"));
        if marker_path.is_file() {
            entry.has_markers = true;
            let checked = MarkerSet::load(&marker_path)
                .and_then(|set| set.validate(entry.width, entry.height).map_err(Error::from).map(|_| set));
            match checked {
                Ok(set) if set.is_empty() => {
                    entry.issues.push(EntryIssue::InvalidMarkers("no markers".into()));
                }
                Ok(_) => {}
                Err(e) => entry.issues.push(EntryIssue::InvalidMarkers(e.to_string())),
            }
        }
        let gt_path = root.join(GT_DIR).join(format!("{stem}.png"));
        if gt_path.is_file() {
            entry.has_gt = true;
            match image::image_dimensions(&gt_path) {
                Ok((gw, gh)) if (gw, gh) != (w, h) => {
                    log::warn!("{stem}: ground truth is {gw}x{gh}, image is {w}x{h}");
                    entry.issues.push(EntryIssue::GtSizeMismatch);
                }
                Ok(_) => {}
                Err(e) => entry.issues.push(EntryIssue::GtUnreadable(e.to_string())),
            }
        }
        entries.push(entry);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(pair) = entries.windows(2).find(|p| p[0].id == p[1].id) {
        return Err(crate::error::invalid(format!("duplicate image id {:?}", pair[0].id)));
    }
    Ok(DatasetIndex { root, entries })
}

impl DatasetIndex {
    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    fn entry(&self, id: &str) -> Result<&DatasetEntry> {
        self.get(id).ok_or_else(|| Error::NotFound(format!("image {id:?}")))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| e.trainable())
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.root.join(IMAGES_DIR).join(&self.entry(id)?.file))
    }

    pub fn markers_path(&self, id: &str) -> PathBuf {
        self.root.join(MARKERS_DIR).join(format!("{id}.json"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join(GT_DIR).join(format!("{id}.png"))
    }

    pub fn load_image(&self, id: &str) -> Result<FeatureMap> {
        FeatureMap::load_png(self.image_path(id)?)
    }

    /// Ground truth when present and usable for metrics.
    pub fn load_gt(&self, id: &str) -> Result<Option<BinaryMask>> {
        if !self.entry(id)?.evaluable() {
            return Ok(None);
        }
        BinaryMask::load_png(self.gt_path(id)).map(Some)
    }

    pub fn load_markers(&self, id: &str) -> Result<Option<MarkerSet>> {
        let path = self.markers_path(id);
        if !path.is_file() {
            return Ok(None);
        }
        MarkerSet::load(path).map(Some)
    }

    /// Loads the listed images that are trainable, in the given order.
    pub fn training_images(&self, ids: &[String]) -> Result<Vec<TrainingImage>> {
        let mut out = Vec::new();
        for id in ids {
            let entry = self.entry(id)?;
            if !entry.trainable() {
                continue;
            }
            let markers = self
                .load_markers(id)?
                .ok_or_else(|| Error::NotFound(format!("markers for {id:?}")))?;
            out.push(TrainingImage {
                id: id.clone(),
                image: self.load_image(id)?,
                markers,
            });
        }
        Ok(out)
    }
}
