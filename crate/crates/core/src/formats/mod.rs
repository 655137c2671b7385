//! Annotation and detection file formats.
//!
//! Two layouts are supported:
//!
//! * COCO-style structured text: an annotation file with `images`,
//!   `annotations` and `categories`, and a results file holding a flat list
//!   of `{image_id, category_id, bbox: [x, y, w, h], score}`.
//! * VisDrone devkit text: one file per image, one object per line as
//!   `x,y,w,h,score_or_flag,category,truncation,occlusion`.

mod coco;
mod visdrone;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CategoryTable, GeometryError, GroundTruthBox, ScoredDetection};

pub use coco::{parse_coco_annotations, parse_coco_detections, write_coco_annotations, write_coco_detections};
pub use visdrone::{
    parse_visdrone, parse_visdrone_detections, parse_visdrone_ground_truth, write_visdrone_detections,
    write_visdrone_ground_truth, VisdroneMode, VisdroneRecords,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("annotation references unknown category id {0}")]
    UnknownCategory(u32),
    #[error("annotation references unknown image id {0}")]
    UnknownImage(u64),
    #[error("entry {index}: {source}")]
    Invalid {
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("entry {index}: bbox must have 4 elements, found {found}")]
    BadBoxArity { index: usize, found: usize },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// Ground-truth collection: images, category table and boxes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub categories: CategoryTable,
    pub ground_truth: Vec<GroundTruthBox>,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Ground truth grouped by image id, preserving file order within an image.
    pub fn gt_by_image(&self) -> BTreeMap<u64, Vec<&GroundTruthBox>> {
        let mut map: BTreeMap<u64, Vec<&GroundTruthBox>> = BTreeMap::new();
        for g in &self.ground_truth {
            map.entry(g.image).or_default().push(g);
        }
        map
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id).max().map_or(1, |m| m + 1)
    }

    /// Checks that every box references a known image and category.
    pub fn validate(&self) -> Result<(), FormatError> {
        let mut ids = std::collections::BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id) {
                return Err(FormatError::DuplicateImage(img.id));
            }
        }
        for g in &self.ground_truth {
            if !ids.contains(&g.image) {
                return Err(FormatError::UnknownImage(g.image));
            }
            if !self.categories.contains(g.category) {
                return Err(FormatError::UnknownCategory(g.category));
            }
        }
        Ok(())
    }
}

/// Detections from one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub model: u32,
    pub detections: Vec<ScoredDetection>,
}

impl DetectionFile {
    pub fn new(model: u32, detections: Vec<ScoredDetection>) -> Self {
        Self { model, detections }
    }

    /// Detections grouped by image id, preserving input order within an image.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<ScoredDetection>> {
        let mut map: BTreeMap<u64, Vec<ScoredDetection>> = BTreeMap::new();
        for d in &self.detections {
            map.entry(d.image).or_default().push(*d);
        }
        map
    }
}

/// Converts a serde_json line/column position into a byte offset of `text`.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}
