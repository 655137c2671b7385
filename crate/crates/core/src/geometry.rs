//! Box geometry and the shared detection data model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate in box ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("negative extent: box ({0}, {1}, {2}, {3}) has x_br < x_tl or y_br < y_tl")]
    NegativeExtent(f64, f64, f64, f64),
    #[error("negative width or height ({w}, {h})")]
    NegativeSize { w: f64, h: f64 },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("scale factor {0} must be finite and positive")]
    BadScale(f64),
    #[error("duplicate category id {0}")]
    DuplicateCategory(u32),
}

/// Axis-aligned box in corner form, continuous pixel coordinates.
///
/// Always satisfies `x_br >= x_tl`, `y_br >= y_tl` with finite coordinates;
/// zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x_tl: f64,
    y_tl: f64,
    x_br: f64,
    y_br: f64,
}

impl BBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self, GeometryError> {
        if !(x_tl.is_finite() && y_tl.is_finite() && x_br.is_finite() && y_br.is_finite()) {
            return Err(GeometryError::NonFinite(x_tl, y_tl, x_br, y_br));
        }
        if x_br < x_tl || y_br < y_tl {
            return Err(GeometryError::NegativeExtent(x_tl, y_tl, x_br, y_br));
        }
        Ok(Self { x_tl, y_tl, x_br, y_br })
    }

    /// Lifts the `(x, y, width, height)` layout used by COCO and VisDrone.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if w < 0.0 || h < 0.0 {
            return Err(GeometryError::NegativeSize { w, h });
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn x_tl(&self) -> f64 {
        self.x_tl
    }

    pub fn y_tl(&self) -> f64 {
        self.y_tl
    }

    pub fn x_br(&self) -> f64 {
        self.x_br
    }

    pub fn y_br(&self) -> f64 {
        self.y_br
    }

    /// `[x_tl, y_tl, x_br, y_br]`
    pub fn corners(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn from_corners(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap rectangle, 0 when disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_br.min(other.x_br) - self.x_tl.max(other.x_tl);
        let h = self.y_br.min(other.y_br) - self.y_tl.max(other.y_tl);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. A zero union (two degenerate boxes) yields 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// Quality predicate: IoU strictly larger than `t`.
    ///
    /// The evaluator uses [`crate::eval::iou_passes`] (`>=`) instead.
    pub fn meets_quality(&self, gt: &BBox, t: f64) -> bool {
        self.iou(gt) > t
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x_tl + dx, self.y_tl + dy, self.x_br + dx, self.y_br + dy)
    }

    /// Scales all coordinates about the origin.
    pub fn scale(&self, k: f64) -> Result<Self, GeometryError> {
        if !(k.is_finite() && k > 0.0) {
            return Err(GeometryError::BadScale(k));
        }
        Self::new(self.x_tl * k, self.y_tl * k, self.x_br * k, self.y_br * k)
    }

    /// Clips to `[0, width] x [0, height]`. A box entirely outside collapses
    /// onto the nearest edge.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width.max(0.0));
        let cy = |v: f64| v.clamp(0.0, height.max(0.0));
        Self {
            x_tl: cx(self.x_tl),
            y_tl: cy(self.y_tl),
            x_br: cx(self.x_br),
            y_br: cy(self.y_br),
        }
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x_tl: f64,
            y_tl: f64,
            x_br: f64,
            y_br: f64,
        }
        let r = Raw::deserialize(de)?;
        BBox::new(r.x_tl, r.y_tl, r.x_br, r.y_br).map_err(serde::de::Error::custom)
    }
}

/// Area of a box, `(x_br - x_tl) * (y_br - y_tl)`.
pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    a.intersection(b)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn meets_quality(pred: &BBox, gt: &BBox, t: f64) -> bool {
    pred.meets_quality(gt, t)
}

/// One detector output: box, confidence, label and provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub bbox: BBox,
    pub score: f64,
    pub category: u32,
    pub model: u32,
    pub image: u64,
}

impl ScoredDetection {
    pub fn new(bbox: BBox, score: f64, category: u32, model: u32, image: u64) -> Result<Self, GeometryError> {
        check_score(score)?;
        Ok(Self {
            bbox,
            score,
            category,
            model,
            image,
        })
    }
}

pub(crate) fn check_score(score: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(GeometryError::ScoreOutOfRange(score))
    }
}

/// Annotated object. Crowd regions never count as true positives but absorb
/// detections that would otherwise be false positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub category: u32,
    pub image: u64,
    pub crowd: bool,
    /// Polygon outlines `[x0, y0, x1, y1, ...]` in image pixels, when the
    /// source annotation carried a segmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Vec<Vec<f64>>>,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, category: u32, image: u64) -> Self {
        Self {
            bbox,
            category,
            image,
            crowd: false,
            segmentation: None,
        }
    }
}

pub const VISDRONE_CLASSES: [&str; 10] = [
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryTable {
    entries: Vec<(u32, String)>,
}

impl CategoryTable {
    pub fn new(entries: Vec<(u32, String)>) -> Result<Self, GeometryError> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(*id) {
                return Err(GeometryError::DuplicateCategory(*id));
            }
        }
        Ok(Self { entries })
    }

    /// The ten VisDrone detection classes, ids 1..=10.
    pub fn visdrone() -> Self {
        Self {
            entries: VISDRONE_CLASSES
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, n.to_string()))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, String)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.iter().any(|(i, _)| *i == id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, n)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
