//! COCO-protocol detection evaluation: greedy matching, precision/recall,
//! 101-point interpolated AP and the mAP summaries over IoU thresholds
//! 0.50:0.05:0.95.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{Dataset, DetectionFile};
use crate::geometry::{BBox, GroundTruthBox, ScoredDetection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("detection references image id {0}, which is not in the dataset")]
    UnknownImage(u64),
    #[error("detection references category id {0}, which is not in the dataset")]
    UnknownCategory(u32),
    #[error("invalid eval config: {0}")]
    Config(String),
}

/// Number of recall points of the interpolated AP.
pub const RECALL_POINTS: usize = 101;

/// Evaluator matching predicate: IoU at least `thresh`.
pub fn iou_passes(iou: f64, thresh: f64) -> bool {
    iou >= thresh
}

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Recall grid `{0, 0.01, ..., 1.00}`.
pub fn recall_grid() -> impl Iterator<Item = f64> {
    (0..RECALL_POINTS).map(|i| i as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Coco,
    Visdrone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Highest-scored detections kept per image, across categories.
    pub max_dets: usize,
}

impl EvalConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            max_dets: match p {
                Preset::Coco => 100,
                Preset::Visdrone => 500,
            },
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::Config("no IoU thresholds".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(EvalError::Config(format!("IoU threshold {t} outside [0, 1]")));
        }
        if self.max_dets == 0 {
            return Err(EvalError::Config("max_dets must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::preset(Preset::Coco)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Matched the ground-truth box at this index of the input slice.
    TruePositive(usize),
    FalsePositive,
    /// Absorbed by a crowd region; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchEntry {
    pub score: f64,
    /// Index into the detection slice given to [`match_detections`].
    pub detection: usize,
    pub outcome: Outcome,
}

/// Match flags for one image and category, detections in descending score.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    pub entries: Vec<MatchEntry>,
    /// Non-crowd ground truth count, the recall denominator.
    pub num_gt: usize,
}

/// Overlap against a crowd region: intersection over the detection's area.
fn crowd_overlap(det: &BBox, crowd: &BBox) -> f64 {
    let a = det.area();
    if a <= 0.0 {
        0.0
    } else {
        det.intersection(crowd) / a
    }
}

/// Greedy COCO-style matching for one image and one category.
///
/// Detections are taken in descending score (stable for ties). Each one
/// claims the still-unmatched non-crowd box with the highest IoU at or above
/// `iou_thresh`; failing that, a crowd region overlapping it by at least the
/// threshold makes it ignored; otherwise it is a false positive.
pub fn match_detections(dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut entries = Vec::with_capacity(dets.len());
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.crowd || taken[gi] {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou_passes(iou, iou_thresh) && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let outcome = match best {
            Some((gi, _)) => {
                taken[gi] = true;
                Outcome::TruePositive(gi)
            }
            None if gts
                .iter()
                .any(|g| g.crowd && iou_passes(crowd_overlap(&d.bbox, &g.bbox), iou_thresh)) =>
            {
                Outcome::Ignored
            }
            None => Outcome::FalsePositive,
        };
        entries.push(MatchEntry {
            score: d.score,
            detection: di,
            outcome,
        });
    }
    MatchResult {
        entries,
        num_gt: gts.iter().filter(|g| !g.crowd).count(),
    }
}

/// Precision/recall points after each detection of the globally
/// score-sorted list. Results are merged in the given order and sorted
/// stably, so ties keep (image order, within-image order).
pub fn pr_curve<'a>(matches: impl IntoIterator<Item = &'a MatchResult>, num_gt: usize) -> Vec<(f64, f64)> {
    let mut flags: Vec<(f64, bool)> = matches
        .into_iter()
        .flat_map(|m| m.entries.iter())
        .filter_map(|e| match e.outcome {
            Outcome::TruePositive(_) => Some((e.score, true)),
            Outcome::FalsePositive => Some((e.score, false)),
            Outcome::Ignored => None,
        })
        .collect();
    if num_gt == 0 {
        return Vec::new();
    }
    flags.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    flags
        .into_iter()
        .map(|(_, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// 101-point interpolated average precision.
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // envelope[i] = max precision over points i.. (recall is nondecreasing)
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in recall_grid() {
        while idx < curve.len() && curve[idx].0 < r {
            idx += 1;
        }
        if idx == curve.len() {
            break;
        }
        sum += envelope[idx];
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub category: u32,
    pub name: String,
    pub num_gt: usize,
    pub num_dets: usize,
    /// AP per IoU threshold, in the order of [`EvalReport::thresholds`].
    pub ap: Vec<f64>,
}

impl ClassReport {
    pub fn ap_mean(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
    /// Every category of the dataset; ones without ground truth are listed
    /// but excluded from the means.
    pub classes: Vec<ClassReport>,
    /// Class-mean AP at each threshold.
    pub map_per_threshold: Vec<f64>,
    pub map_c: f64,
    pub map_50: f64,
    pub map_75: f64,
}

impl EvalReport {
    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|x| (x - t).abs() < 1e-9)
    }

    /// Per-class AP at a threshold, for classes with ground truth.
    pub fn per_class_at(&self, t: f64) -> Vec<(u32, &str, f64)> {
        let Some(i) = self.threshold_index(t) else {
            return Vec::new();
        };
        self.classes
            .iter()
            .filter(|c| c.num_gt > 0)
            .map(|c| (c.category, c.name.as_str(), c.ap[i]))
            .collect()
    }

    /// Human-readable summary plus per-class breakdown, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<10} {:>8.1}", "map_c", 100.0 * self.map_c);
        let _ = writeln!(s, "{:<10} {:>8.1}", "map_50", 100.0 * self.map_50);
        let _ = writeln!(s, "{:<10} {:>8.1}", "map_75", 100.0 * self.map_75);
        s.push('\n');
        let i50 = self.threshold_index(0.5);
        let i75 = self.threshold_index(0.75);
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "class", "gt", "dets", "ap_c", "ap_50", "ap_75"
        );
        for c in &self.classes {
            if c.num_gt == 0 {
                let _ = writeln!(
                    s,
                    "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7}",
                    c.name, 0, c.num_dets, "-", "-", "-"
                );
                continue;
            }
            let at = |i: Option<usize>| i.map_or("-".to_string(), |i| format!("{:.1}", 100.0 * c.ap[i]));
            let _ = writeln!(
                s,
                "{:<18} {:>7} {:>7} {:>7.1} {:>7} {:>7}",
                c.name,
                c.num_gt,
                c.num_dets,
                100.0 * c.ap_mean(),
                at(i50),
                at(i75)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        s.push('\n');
        s
    }
}

/// Keeps the `max_dets` highest-scored detections of each image.
fn truncate_per_image(dets: &DetectionFile, max_dets: usize) -> BTreeMap<u64, Vec<ScoredDetection>> {
    let mut by_image = dets.by_image();
    for v in by_image.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(max_dets);
    }
    by_image
}

/// Evaluates one detection file against a dataset.
///
/// Work is split per category on the current rayon pool; every reduction
/// runs in a fixed order so the report is identical for any thread count.
pub fn evaluate(dets: &DetectionFile, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let image_ids: BTreeSet<u64> = ds.images.iter().map(|i| i.id).collect();
    for d in &dets.detections {
        if !image_ids.contains(&d.image) {
            return Err(EvalError::UnknownImage(d.image));
        }
        if !ds.categories.contains(d.category) {
            return Err(EvalError::UnknownCategory(d.category));
        }
    }
    let det_by_image = truncate_per_image(dets, cfg.max_dets);

    // (category, image) -> boxes, images in id order
    let mut gt_cells: BTreeMap<(u32, u64), Vec<GroundTruthBox>> = BTreeMap::new();
    for g in &ds.ground_truth {
        gt_cells.entry((g.category, g.image)).or_default().push(g.clone());
    }
    let mut det_cells: BTreeMap<(u32, u64), Vec<ScoredDetection>> = BTreeMap::new();
    for (img, v) in &det_by_image {
        for d in v {
            det_cells.entry((d.category, *img)).or_default().push(*d);
        }
    }

    let categories: Vec<(u32, String)> = ds.categories.entries().to_vec();
    let classes: Vec<ClassReport> = categories
        .par_iter()
        .map(|(cat, name)| {
            let images: BTreeSet<u64> = gt_cells
                .range((*cat, 0)..=(*cat, u64::MAX))
                .map(|((_, i), _)| *i)
                .chain(det_cells.range((*cat, 0)..=(*cat, u64::MAX)).map(|((_, i), _)| *i))
                .collect();
            let empty_g: Vec<GroundTruthBox> = Vec::new();
            let empty_d: Vec<ScoredDetection> = Vec::new();
            let num_gt: usize = images
                .iter()
                .map(|i| {
                    gt_cells
                        .get(&(*cat, *i))
                        .map_or(0, |g| g.iter().filter(|g| !g.crowd).count())
                })
                .sum();
            let num_dets: usize = images
                .iter()
                .map(|i| det_cells.get(&(*cat, *i)).map_or(0, Vec::len))
                .sum();
            let ap = cfg
                .iou_thresholds
                .iter()
                .map(|&t| {
                    let matches: Vec<MatchResult> = images
                        .iter()
                        .map(|i| {
                            let g = gt_cells.get(&(*cat, *i)).unwrap_or(&empty_g);
                            let d = det_cells.get(&(*cat, *i)).unwrap_or(&empty_d);
                            match_detections(d, g, t)
                        })
                        .collect();
                    average_precision(&pr_curve(&matches, num_gt))
                })
                .collect();
            ClassReport {
                category: *cat,
                name: name.clone(),
                num_gt,
                num_dets,
                ap,
            }
        })
        .collect();

    let scored: Vec<&ClassReport> = classes.iter().filter(|c| c.num_gt > 0).collect();
    let map_per_threshold: Vec<f64> = (0..cfg.iou_thresholds.len())
        .map(|ti| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().map(|c| c.ap[ti]).sum::<f64>() / scored.len() as f64
            }
        })
        .collect();
    let map_c = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64;
    let at = |t: f64| {
        cfg.iou_thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
            .map_or(f64::NAN, |i| map_per_threshold[i])
    };
    Ok(EvalReport {
        thresholds: cfg.iou_thresholds.clone(),
        max_dets: cfg.max_dets,
        map_50: at(0.5),
        map_75: at(0.75),
        classes,
        map_per_threshold,
        map_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::ImageInfo;
    use crate::geometry::CategoryTable;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bx: BBox, s: f64, cat: u32, img: u64) -> ScoredDetection {
        ScoredDetection::new(bx, s, cat, 0, img).unwrap()
    }

    fn gt(bx: BBox, cat: u32, img: u64) -> GroundTruthBox {
        GroundTruthBox::new(bx, cat, img)
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn match_fixtures() {
        let g = [gt(b(0.0, 0.0, 10.0, 10.0), 1, 1)];
        // IoU 0.6: 60 / 100
        let m = match_detections(&[det(b(0.0, 0.0, 10.0, 6.0), 0.9, 1, 1)], &g, 0.5);
        assert_eq!(m.entries[0].outcome, Outcome::TruePositive(0));

        let m = match_detections(
            &[
                det(b(0.0, 0.0, 10.0, 10.0), 0.6, 1, 1),
                det(b(0.0, 0.0, 10.0, 9.0), 0.9, 1, 1),
            ],
            &g,
            0.5,
        );
        assert_eq!(m.entries[0].detection, 1);
        assert_eq!(m.entries[0].outcome, Outcome::TruePositive(0));
        assert_eq!(m.entries[1].outcome, Outcome::FalsePositive);

        // exactly 0.5: 4 / 8
        let g = [gt(b(0.0, 0.0, 4.0, 2.0), 1, 1)];
        let d = det(b(0.0, 0.0, 4.0, 1.0), 0.9, 1, 1);
        assert_eq!(d.bbox.iou(&g[0].bbox), 0.5);
        assert_eq!(
            match_detections(&[d], &g, 0.5).entries[0].outcome,
            Outcome::TruePositive(0)
        );
    }

    #[test]
    fn crowd_absorbs_false_positives() {
        let mut crowd = gt(b(0.0, 0.0, 100.0, 100.0), 1, 1);
        crowd.crowd = true;
        let g = [gt(b(0.0, 0.0, 10.0, 10.0), 1, 1), crowd];
        let m = match_detections(
            &[
                det(b(0.0, 0.0, 10.0, 10.0), 0.9, 1, 1),
                det(b(50.0, 50.0, 60.0, 60.0), 0.8, 1, 1),
            ],
            &g,
            0.5,
        );
        assert_eq!(m.num_gt, 1);
        assert_eq!(m.entries[0].outcome, Outcome::TruePositive(0));
        assert_eq!(m.entries[1].outcome, Outcome::Ignored);
    }

    fn result(flags: &[bool], num_gt: usize) -> MatchResult {
        MatchResult {
            entries: flags
                .iter()
                .enumerate()
                .map(|(i, &tp)| MatchEntry {
                    score: 1.0 - i as f64 * 0.1,
                    detection: i,
                    outcome: if tp {
                        Outcome::TruePositive(i)
                    } else {
                        Outcome::FalsePositive
                    },
                })
                .collect(),
            num_gt,
        }
    }

    #[test]
    fn pr_fixtures() {
        assert_eq!(pr_curve(&[result(&[true, false], 1)], 1), vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(pr_curve(&[result(&[false, true], 1)], 1), vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!(pr_curve(&[result(&[], 3)], 3).is_empty());
        assert!(pr_curve(&[result(&[], 0)], 0).is_empty());
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[(1.0, 1.0), (1.0, 0.5)]), 1.0);
        assert_eq!(average_precision(&[(0.0, 0.0), (1.0, 0.5)]), 0.5);
        assert_eq!(average_precision(&[]), 0.0);
        // half recall at full precision: grid points 0..=0.5 count
        assert!((average_precision(&[(0.5, 1.0)]) - 51.0 / 101.0).abs() < 1e-15);
    }

    fn dataset(gts: Vec<GroundTruthBox>, cats: &[u32]) -> Dataset {
        Dataset {
            images: (1..=3)
                .map(|id| ImageInfo {
                    id,
                    width: 100,
                    height: 100,
                    file_name: format!("{id}.png"),
                })
                .collect(),
            categories: CategoryTable::new(cats.iter().map(|c| (*c, format!("c{c}"))).collect()).unwrap(),
            ground_truth: gts,
        }
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![
            gt(b(0.0, 0.0, 10.0, 10.0), 1, 1),
            gt(b(20.0, 20.0, 40.0, 30.0), 2, 1),
            gt(b(5.0, 5.0, 15.0, 25.0), 1, 2),
        ];
        let dets = DetectionFile::new(0, gts.iter().map(|g| det(g.bbox, 1.0, g.category, g.image)).collect());
        let r = evaluate(&dets, &dataset(gts, &[1, 2, 3]), &EvalConfig::default()).unwrap();
        assert_eq!((r.map_c, r.map_50, r.map_75), (1.0, 1.0, 1.0));
        assert_eq!(r.classes[2].num_gt, 0);
        assert_eq!(r.per_class_at(0.5).len(), 2);
        assert!(r.to_table().contains("map_c"));
    }

    #[test]
    fn threshold_gating() {
        let gts = vec![gt(b(0.0, 0.0, 10.0, 10.0), 1, 1), gt(b(0.0, 0.0, 20.0, 20.0), 1, 2)];
        let dets = DetectionFile::new(
            0,
            vec![
                det(b(0.0, 0.0, 10.0, 6.0), 0.9, 1, 1),
                det(b(0.0, 0.0, 20.0, 12.0), 0.8, 1, 2),
            ],
        );
        let r = evaluate(&dets, &dataset(gts, &[1]), &EvalConfig::default()).unwrap();
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.map_75, 0.0);
    }

    #[test]
    fn unknown_ids_rejected() {
        let ds = dataset(vec![], &[1]);
        let bad_img = DetectionFile::new(0, vec![det(b(0.0, 0.0, 1.0, 1.0), 0.5, 1, 9)]);
        assert_eq!(
            evaluate(&bad_img, &ds, &EvalConfig::default()),
            Err(EvalError::UnknownImage(9))
        );
        let bad_cat = DetectionFile::new(0, vec![det(b(0.0, 0.0, 1.0, 1.0), 0.5, 7, 1)]);
        assert_eq!(
            evaluate(&bad_cat, &ds, &EvalConfig::default()),
            Err(EvalError::UnknownCategory(7))
        );
    }

    #[test]
    fn max_dets_truncates_per_image() {
        let gts = vec![gt(b(0.0, 0.0, 10.0, 10.0), 1, 1), gt(b(50.0, 50.0, 60.0, 60.0), 1, 1)];
        let dets = DetectionFile::new(
            0,
            vec![
                det(b(0.0, 0.0, 10.0, 10.0), 0.9, 1, 1),
                det(b(50.0, 50.0, 60.0, 60.0), 0.8, 1, 1),
            ],
        );
        let cfg = EvalConfig {
            max_dets: 1,
            ..EvalConfig::default()
        };
        let r = evaluate(&dets, &dataset(gts, &[1]), &cfg).unwrap();
        assert!((r.map_50 - 51.0 / 101.0).abs() < 1e-12);
    }
}
