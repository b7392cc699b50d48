//! User-drawn disk markers: the only supervision FLIM needs.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default marker radius in pixels.
pub const DEFAULT_RADIUS: f64 = 3.0;

/// Class of a marker, and of every kernel derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Foreground,
    Background,
}

impl Label {
    /// Numeric code: 1 for foreground, 2 for background.
    pub fn code(self) -> u8 {
        match self {
            Label::Foreground => 1,
            Label::Background => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Label::Foreground),
            2 => Some(Label::Background),
            _ => None,
        }
    }
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS
}

/// A labeled disk centered on an original-scale pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub id: u32,
    pub x: u32,
    pub y: u32,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub label: Label,
}

impl Marker {
    pub fn new(id: u32, x: u32, y: u32, label: Label) -> Self {
        Self {
            id,
            x,
            y,
            radius: DEFAULT_RADIUS,
            label,
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }
}

/// All markers drawn on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    /// File name of the image (never a path).
    pub image: String,
    pub markers: Vec<Marker>,
}

/// A schema violation with the JSON path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ValidationError {}

impl From<ValidationError> for Error {
    fn from(e: ValidationError) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}

impl MarkerSet {
    pub fn new(image: impl Into<String>, markers: Vec<Marker>) -> Self {
        Self {
            image: image.into(),
            markers,
        }
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    /// Checks ids, radii and centers against a `width×height` image.
    pub fn validate(&self, width: usize, height: usize) -> std::result::Result<(), ValidationError> {
        let err = |field: String, message: String| ValidationError { field, message };
        if self.image.is_empty() || self.image.contains(['/', '\\']) {
            return Err(err(
                "image".into(),
                "must be a bare file name".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, m) in self.markers.iter().enumerate() {
            if !seen.insert(m.id) {
                return Err(err(format!("markers[{i}].id"), format!("duplicate id {}", m.id)));
            }
            if !(m.radius.is_finite() && m.radius > 0.0) {
                return Err(err(format!("markers[{i}].radius"), "must be a positive number".into()));
            }
            if m.x as usize >= width {
                return Err(err(
                    format!("markers[{i}].x"),
                    format!("{} outside image width {width}", m.x),
                ));
            }
            if m.y as usize >= height {
                return Err(err(
                    format!("markers[{i}].y"),
                    format!("{} outside image height {height}", m.y),
                ));
            }
        }
        Ok(())
    }

    /// Sorts markers by id, the canonical order used when persisting.
    pub fn canonicalize(&mut self) {
        self.markers.sort_by_key(|m| m.id);
    }

    pub fn to_canonical_json(&self) -> String {
        let mut set = self.clone();
        set.canonicalize();
        serde_json::to_string_pretty(&set).expect("marker sets always serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_canonical_json();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// All pixels within Euclidean distance `radius` of the marker center,
/// clipped to a `width×height` domain, in row-major order.
pub fn rasterize(marker: &Marker, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
    let (cx, cy) = (marker.x as i64, marker.y as i64);
    if cx as usize >= width || cy as usize >= height {
        return Err(invalid(format!(
            "marker {} center ({cx}, {cy}) outside {width}x{height} domain",
            marker.id
        )));
    }
    if !(marker.radius.is_finite() && marker.radius > 0.0) {
        return Err(invalid(format!("marker {} radius must be a positive number", marker.id)));
    }
    let r = marker.radius.floor() as i64;
    let r2 = marker.radius * marker.radius;
    let mut pixels = Vec::new();
    for y in (cy - r).max(0)..=(cy + r).min(height as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
            let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
            if dx * dx + dy * dy <= r2 {
                pixels.push((x as usize, y as usize));
            }
        }
    }
    Ok(pixels)
}

/// Maps original-scale pixels to a map downsampled by `scale`:
/// `(x, y) -> (x / scale, y / scale)` clamped to `domain`, keeping the first
/// occurrence of each mapped pixel.
pub fn map_to_scale(
    pixels: &[(usize, usize)],
    scale: usize,
    domain: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    if scale == 0 {
        return Err(invalid("scale must be >= 1"));
    }
    if domain.0 == 0 || domain.1 == 0 {
        return Err(invalid("target domain is empty"));
    }
    let mut seen = HashSet::with_capacity(pixels.len());
    Ok(pixels
        .iter()
        .map(|&p| map_point(p, scale, domain))
        .filter(|p| seen.insert(*p))
        .collect())
}

/// Maps a single pixel with the same rule as [`map_to_scale`].
pub fn map_point(p: (usize, usize), scale: usize, domain: (usize, usize)) -> (usize, usize) {
    (
        (p.0 / scale).min(domain.0 - 1),
        (p.1 / scale).min(domain.1 - 1),
    )
}
