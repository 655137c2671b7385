use std::fmt::Write as _;

use super::FormatError;
use crate::geometry::{BBox, GroundTruthBox, ScoredDetection};

/// Category 0 marks ignored regions and 11 marks "others"; neither is scored.
const IGNORED_REGION: u32 = 0;
const OTHERS: u32 = 11;

/// How the fifth field of a VisDrone line is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisdroneMode {
    /// 0/1 validity flag; flag 0 entries are skipped.
    GroundTruth,
    /// Detection confidence, tagged with the given model id.
    Detection { model: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisdroneRecords {
    GroundTruth(Vec<GroundTruthBox>),
    Detections(Vec<ScoredDetection>),
}

struct Line {
    bbox: BBox,
    score: f64,
    category: u32,
}

fn field(line_no: usize, name: &str, raw: &str) -> Result<f64, FormatError> {
    let v: f64 = raw.trim().parse().map_err(|_| FormatError::Line {
        line: line_no,
        message: format!("{name} field {raw:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(FormatError::Line {
            line: line_no,
            message: format!("{name} field {raw:?} is not finite"),
        });
    }
    Ok(v)
}

fn parse_lines(text: &str) -> impl Iterator<Item = Result<(usize, Line), FormatError>> + '_ {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line_no = i + 1;
        let raw = raw.trim_end_matches('\r').trim();
        if raw.is_empty() {
            return None;
        }
        Some(parse_line(line_no, raw).map(|l| (line_no, l)))
    })
}

fn parse_line(line_no: usize, raw: &str) -> Result<Line, FormatError> {
    let mut fields: Vec<&str> = raw.split(',').collect();
    // some devkit exports end every line with a comma
    if fields.len() == 9 && fields[8].trim().is_empty() {
        fields.pop();
    }
    if fields.len() != 8 {
        return Err(FormatError::Line {
            line: line_no,
            message: format!("expected 8 comma-separated fields, found {}", fields.len()),
        });
    }
    let x = field(line_no, "x", fields[0])?;
    let y = field(line_no, "y", fields[1])?;
    let w = field(line_no, "width", fields[2])?;
    let h = field(line_no, "height", fields[3])?;
    let score = field(line_no, "score", fields[4])?;
    let category = field(line_no, "category", fields[5])?;
    // truncation and occlusion are validated but unused
    field(line_no, "truncation", fields[6])?;
    field(line_no, "occlusion", fields[7])?;
    if category < 0.0 || category.fract() != 0.0 || category > OTHERS as f64 {
        return Err(FormatError::Line {
            line: line_no,
            message: format!("category {category} is not a VisDrone class id"),
        });
    }
    let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| FormatError::Line {
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(Line {
        bbox,
        score,
        category: category as u32,
    })
}

fn scored(category: u32) -> bool {
    category != IGNORED_REGION && category != OTHERS
}

/// Parses one per-image VisDrone file.
pub fn parse_visdrone(text: &str, image: u64, mode: VisdroneMode) -> Result<VisdroneRecords, FormatError> {
    match mode {
        VisdroneMode::GroundTruth => parse_visdrone_ground_truth(text, image).map(VisdroneRecords::GroundTruth),
        VisdroneMode::Detection { model } => {
            parse_visdrone_detections(text, image, model).map(VisdroneRecords::Detections)
        }
    }
}

pub fn parse_visdrone_ground_truth(text: &str, image: u64) -> Result<Vec<GroundTruthBox>, FormatError> {
    let mut out = Vec::new();
    for item in parse_lines(text) {
        let (line_no, l) = item?;
        if l.score != 0.0 && l.score != 1.0 {
            return Err(FormatError::Line {
                line: line_no,
                message: format!("ground-truth flag must be 0 or 1, found {}", l.score),
            });
        }
        if l.score == 0.0 || !scored(l.category) {
            continue;
        }
        out.push(GroundTruthBox::new(l.bbox, l.category, image));
    }
    Ok(out)
}

pub fn parse_visdrone_detections(text: &str, image: u64, model: u32) -> Result<Vec<ScoredDetection>, FormatError> {
    let mut out = Vec::new();
    for item in parse_lines(text) {
        let (line_no, l) = item?;
        if !scored(l.category) {
            continue;
        }
        let d = ScoredDetection::new(l.bbox, l.score, l.category, model, image).map_err(|e| FormatError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

/// One line per detection: `x,y,w,h,score,category,-1,-1`.
pub fn write_visdrone_detections<'a>(dets: impl IntoIterator<Item = &'a ScoredDetection>) -> String {
    let mut s = String::new();
    for d in dets {
        let [x, y, w, h] = d.bbox.to_xywh();
        let _ = writeln!(s, "{x:.6},{y:.6},{w:.6},{h:.6},{:.6},{},-1,-1", d.score, d.category);
    }
    s
}

/// One line per box: `x,y,w,h,1,category,0,0`.
pub fn write_visdrone_ground_truth<'a>(gts: impl IntoIterator<Item = &'a GroundTruthBox>) -> String {
    let mut s = String::new();
    for g in gts {
        let [x, y, w, h] = g.bbox.to_xywh();
        let _ = writeln!(s, "{x},{y},{w},{h},1,{},0,0", g.category);
    }
    s
}

#[cfg(test)]
fn class_name(id: u32) -> Option<&'static str> {
    crate::geometry::VISDRONE_CLASSES
        .get((id as usize).checked_sub(1)?)
        .copied()
}
