use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{byte_offset, Dataset, DetectionFile, FormatError, ImageInfo};
use crate::geometry::{BBox, CategoryTable, GroundTruthBox, ScoredDetection};

#[derive(Deserialize)]
struct RawAnnotationFile {
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize, Serialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: u32,
    bbox: Vec<f64>,
    #[serde(default)]
    iscrowd: u64,
    #[serde(default)]
    segmentation: Option<serde_json::Value>,
}

#[derive(Deserialize, Serialize)]
struct RawCategory {
    id: u32,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct RawResult {
    image_id: u64,
    category_id: u32,
    bbox: Vec<f64>,
    score: f64,
}

fn json_error(text: &str, e: serde_json::Error) -> FormatError {
    FormatError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

fn xywh(index: usize, v: &[f64]) -> Result<BBox, FormatError> {
    if v.len() != 4 {
        return Err(FormatError::BadBoxArity { index, found: v.len() });
    }
    BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|source| FormatError::Invalid { index, source })
}

/// Polygon segmentations only; RLE masks (crowd regions) are ignored.
fn polygons(seg: &serde_json::Value) -> Option<Vec<Vec<f64>>> {
    let outer = seg.as_array()?;
    let polys: Vec<Vec<f64>> = outer
        .iter()
        .filter_map(|p| {
            let coords: Option<Vec<f64>> = p.as_array()?.iter().map(|c| c.as_f64()).collect();
            coords.filter(|c| c.len() >= 6 && c.len() % 2 == 0 && c.iter().all(|v| v.is_finite()))
        })
        .collect();
    (!polys.is_empty()).then_some(polys)
}

/// Parses a COCO annotation file. Boxes overhanging the image are clipped.
pub fn parse_coco_annotations(text: &str) -> Result<Dataset, FormatError> {
    let raw: RawAnnotationFile = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
    let categories = CategoryTable::new(raw.categories.into_iter().map(|c| (c.id, c.name)).collect())?;
    let mut seen = BTreeSet::new();
    let images: Vec<ImageInfo> = raw
        .images
        .into_iter()
        .map(|i| ImageInfo {
            id: i.id,
            width: i.width,
            height: i.height,
            file_name: i.file_name,
        })
        .collect();
    for img in &images {
        if !seen.insert(img.id) {
            return Err(FormatError::DuplicateImage(img.id));
        }
    }
    let mut ground_truth = Vec::with_capacity(raw.annotations.len());
    for (index, a) in raw.annotations.into_iter().enumerate() {
        let img = images
            .iter()
            .find(|i| i.id == a.image_id)
            .ok_or(FormatError::UnknownImage(a.image_id))?;
        if !categories.contains(a.category_id) {
            return Err(FormatError::UnknownCategory(a.category_id));
        }
        let bbox = xywh(index, &a.bbox)?.clip(img.width as f64, img.height as f64);
        ground_truth.push(GroundTruthBox {
            bbox,
            category: a.category_id,
            image: a.image_id,
            crowd: a.iscrowd != 0,
            segmentation: a.segmentation.as_ref().and_then(polygons),
        });
    }
    Ok(Dataset {
        images,
        categories,
        ground_truth,
    })
}

#[derive(Serialize)]
struct OutAnnotationFile<'a> {
    images: Vec<RawImage>,
    annotations: Vec<OutAnnotation<'a>>,
    categories: Vec<RawCategory>,
}

#[derive(Serialize)]
struct OutAnnotation<'a> {
    id: usize,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    segmentation: Option<&'a Vec<Vec<f64>>>,
}

pub fn write_coco_annotations(ds: &Dataset) -> String {
    let out = OutAnnotationFile {
        images: ds
            .images
            .iter()
            .map(|i| RawImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
            .collect(),
        annotations: ds
            .ground_truth
            .iter()
            .enumerate()
            .map(|(i, g)| OutAnnotation {
                id: i + 1,
                image_id: g.image,
                category_id: g.category,
                bbox: g.bbox.to_xywh(),
                area: g.bbox.area(),
                iscrowd: g.crowd as u8,
                segmentation: g.segmentation.as_ref(),
            })
            .collect(),
        categories: ds
            .categories
            .entries()
            .iter()
            .map(|(id, name)| RawCategory {
                id: *id,
                name: name.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&out).expect("annotation serialization is infallible");
    s.push('\n');
    s
}

/// Parses a COCO results list, tagging every detection with `model`.
pub fn parse_coco_detections(text: &str, model: u32) -> Result<DetectionFile, FormatError> {
    let raw: Vec<RawResult> = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
    let detections = raw
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let bbox = xywh(index, &r.bbox)?;
            ScoredDetection::new(bbox, r.score, r.category_id, model, r.image_id)
                .map_err(|source| FormatError::Invalid { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DetectionFile { model, detections })
}

/// Serializes detections as a COCO results list with 6 decimal places.
pub fn write_coco_detections(dets: &DetectionFile) -> String {
    if dets.detections.is_empty() {
        return "[]\n".to_string();
    }
    let mut s = String::from("[\n");
    for (i, d) in dets.detections.iter().enumerate() {
        let [x, y, w, h] = d.bbox.to_xywh();
        let _ = write!(
            s,
            "  {{\"image_id\": {}, \"category_id\": {}, \"bbox\": [{:.6}, {:.6}, {:.6}, {:.6}], \"score\": {:.6}}}",
            d.image, d.category, x, y, w, h, d.score
        );
        s.push_str(if i + 1 < dets.detections.len() { ",\n" } else { "\n" });
    }
    s.push_str("]\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANN: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],
        "annotations": [
            {"id": 7, "image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40], "iscrowd": 0,
             "segmentation": [[10, 20, 40, 20, 40, 60]]},
            {"id": 8, "image_id": 1, "category_id": 3, "bbox": [90, 70, 30, 40], "iscrowd": 1,
             "segmentation": {"counts": "abc", "size": [80, 100]}}
        ],
        "categories": [{"id": 3, "name": "car"}]
    }"#;

    #[test]
    fn annotations_are_lifted_and_clipped() {
        let ds = parse_coco_annotations(ANN).unwrap();
        assert_eq!(ds.ground_truth.len(), 2);
        assert_eq!(ds.ground_truth[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert!(!ds.ground_truth[0].crowd);
        assert_eq!(ds.ground_truth[0].segmentation.as_ref().unwrap().len(), 1);
        assert!(ds.ground_truth[1].crowd);
        assert!(ds.ground_truth[1].segmentation.is_none());
        assert_eq!(ds.ground_truth[1].bbox, BBox::new(90.0, 70.0, 100.0, 80.0).unwrap());
    }

    #[test]
    fn empty_annotations() {
        let ds = parse_coco_annotations(
            r#"{"images": [{"id": 1, "width": 5, "height": 5}], "annotations": [], "categories": []}"#,
        )
        .unwrap();
        assert!(ds.ground_truth.is_empty());
        assert_eq!(ds.images.len(), 1);
    }

    #[test]
    fn unknown_image_is_reference_error() {
        let t = r#"{"images": [{"id": 1, "width": 5, "height": 5}],
            "annotations": [{"image_id": 999, "category_id": 1, "bbox": [0,0,1,1]}],
            "categories": [{"id": 1, "name": "x"}]}"#;
        assert!(matches!(parse_coco_annotations(t), Err(FormatError::UnknownImage(999))));
        let t = r#"{"images": [{"id": 1, "width": 5, "height": 5}],
            "annotations": [{"image_id": 1, "category_id": 42, "bbox": [0,0,1,1]}],
            "categories": [{"id": 1, "name": "x"}]}"#;
        assert!(matches!(
            parse_coco_annotations(t),
            Err(FormatError::UnknownCategory(42))
        ));
    }

    #[test]
    fn malformed_reports_offset() {
        let t = "{\n  \"images\": [,]\n}";
        match parse_coco_annotations(t) {
            Err(FormatError::Parse { offset, .. }) => assert_eq!(&t[offset..offset + 1], ","),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detections_parse() {
        let f = parse_coco_detections(
            r#"[{"image_id": 1, "category_id": 4, "bbox": [0, 0, 10, 10], "score": 0.9}]"#,
            3,
        )
        .unwrap();
        let d = f.detections[0];
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        assert_eq!((d.score, d.category, d.model, d.image), (0.9, 4, 3, 1));
        assert!(parse_coco_detections("[]", 0).unwrap().detections.is_empty());
        assert!(matches!(
            parse_coco_detections(
                r#"[{"image_id": 1, "category_id": 4, "bbox": [0, 0, 10, 10], "score": 1.5}]"#,
                0
            ),
            Err(FormatError::Invalid { index: 0, .. })
        ));
        assert!(matches!(
            parse_coco_detections(
                r#"[{"image_id": 1, "category_id": 4, "bbox": [0, 0, 10], "score": 0.5}]"#,
                0
            ),
            Err(FormatError::BadBoxArity { index: 0, found: 3 })
        ));
    }

    #[test]
    fn writer_formats() {
        assert_eq!(write_coco_detections(&DetectionFile::default()), "[]\n");
        let d = ScoredDetection::new(BBox::new(0.8, 0.8, 10.8, 10.8).unwrap(), 0.75, 1, 0, 2).unwrap();
        let s = write_coco_detections(&DetectionFile::new(0, vec![d]));
        assert!(
            s.contains("\"bbox\": [0.800000, 0.800000, 10.000000, 10.000000]"),
            "{s}"
        );
        let back = parse_coco_detections(&s, 0).unwrap();
        assert_eq!(back.detections.len(), 1);
        assert!((back.detections[0].bbox.x_br() - 10.8).abs() < 1e-6);
    }

    #[test]
    fn annotation_writer_round_trips() {
        let ds = parse_coco_annotations(ANN).unwrap();
        let again = parse_coco_annotations(&write_coco_annotations(&ds)).unwrap();
        assert_eq!(again.images, ds.images);
        assert_eq!(again.categories, ds.categories);
        assert_eq!(again.ground_truth.len(), ds.ground_truth.len());
        for (a, b) in again.ground_truth.iter().zip(&ds.ground_truth) {
            assert_eq!(a.category, b.category);
            assert_eq!(a.crowd, b.crowd);
            for (p, q) in a.bbox.corners().iter().zip(b.bbox.corners()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
