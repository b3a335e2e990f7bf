use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// ArtDL 2.0 classes, named by the titles of their Wikipedia articles.
pub const ARTDL_CLASSES: [&str; 10] = [
    "Anthony of Padua",
    "John the Baptist",
    "Paul the Apostle",
    "Francis of Assisi",
    "Mary Magdalene",
    "Saint Jerome",
    "Saint Dominic",
    "Mary, mother of Jesus",
    "Saint Peter",
    "Saint Sebastian",
];

/// IconArt classes after renaming (Saint Sebastien, child Jesus and nudity
/// become person, baby and naked person).
pub const ICONART_CLASSES: [&str; 7] = [
    "person",
    "crucifixion of jesus",
    "angel",
    "mary",
    "baby",
    "naked person",
    "ruins",
];

pub fn builtin_vocabulary(name: &str) -> Option<&'static [&'static str]> {
    match name.to_ascii_lowercase().as_str() {
        "artdl" | "artdl2" | "artdl-2.0" => Some(&ARTDL_CLASSES),
        "iconart" => Some(&ICONART_CLASSES),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub gt_labels: Vec<String>,
    #[serde(default)]
    pub gt_boxes: Vec<GtBox>,
}

impl ImageRecord {
    pub fn has_label(&self, label: &str) -> bool {
        self.gt_labels.iter().any(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.id == id)
    }

    /// Checks every manifest invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.classes.is_empty() {
            return bad("empty class list".into());
        }
        let mut classes = HashSet::new();
        for c in &self.classes {
            if c.is_empty() {
                return bad("empty class name".into());
            }
            if !classes.insert(c.as_str()) {
                return bad(format!("duplicate class {c:?}"));
            }
        }
        let mut ids = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return bad(format!("duplicate image id {:?}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                return bad(format!("image {:?} has zero size", img.id));
            }
            let mut labels = HashSet::new();
            for l in &img.gt_labels {
                if !classes.contains(l.as_str()) {
                    return Err(Error::UnknownLabel(l.clone()));
                }
                if !labels.insert(l.as_str()) {
                    return bad(format!("image {:?} repeats label {l:?}", img.id));
                }
            }
            for gt in &img.gt_boxes {
                if !labels.contains(gt.label.as_str()) {
                    if !classes.contains(gt.label.as_str()) {
                        return Err(Error::UnknownLabel(gt.label.clone()));
                    }
                    return bad(format!(
                        "image {:?} has a {:?} box but not the label",
                        img.id, gt.label
                    ));
                }
                let b = gt.bbox;
                if !b.within(img.width as f64, img.height as f64) {
                    return bad(format!(
                        "image {:?}: box ({}, {}, {}, {}) exceeds {}x{}",
                        img.id, b.x0, b.y0, b.x1, b.y1, img.width, img.height
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// Boxes are parsed as plain corner arrays first so a bad box surfaces as
// `Error::DegenerateBox` instead of a generic JSON error.
#[derive(Deserialize)]
struct RawGtBox {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawImage {
    id: String,
    width: u32,
    height: u32,
    gt_labels: Vec<String>,
    #[serde(default)]
    gt_boxes: Vec<RawGtBox>,
}

#[derive(Deserialize)]
struct RawManifest {
    name: String,
    classes: Vec<String>,
    images: Vec<RawImage>,
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let raw: RawManifest = serde_json::from_str(text)?;
    let mut images = Vec::with_capacity(raw.images.len());
    for img in raw.images {
        let mut gt_boxes = Vec::with_capacity(img.gt_boxes.len());
        for b in img.gt_boxes {
            gt_boxes.push(GtBox {
                label: b.label,
                bbox: BBox::try_from(b.bbox)?,
            });
        }
        images.push(ImageRecord {
            id: img.id,
            width: img.width,
            height: img.height,
            gt_labels: img.gt_labels,
            gt_boxes,
        });
    }
    let manifest = DatasetManifest {
        name: raw.name,
        classes: raw.classes,
        images,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    parse_manifest(&fs::read_to_string(path)?)
}
