//! Ensembling of detector outputs.
//!
//! [`wbf_fuse`] clusters same-label boxes and replaces every cluster with a
//! confidence-weighted mean box. [`nms`] and [`soft_nms`] are the suppression
//! baselines it is usually compared against.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::DetectionFile;
use crate::geometry::{BBox, ScoredDetection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("detections span several images ({0} and {1}); fuse one image at a time")]
    MixedImages(u64, u64),
    #[error("ensemble needs at least one detection file")]
    NoInputs,
    #[error("num_models is {expected} but {found} detection files were given")]
    ModelCountMismatch { expected: usize, found: usize },
    #[error("invalid fusion config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    None,
    /// `score * min(N, M) / M`, N = cluster size, M = number of models.
    #[default]
    ClampedCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// A candidate joins a cluster when IoU with the running fused box is
    /// strictly above this value.
    pub match_iou: f64,
    pub num_models: usize,
    pub rescale: RescaleMode,
    /// Fused boxes scoring below this after rescaling are dropped.
    pub score_floor: f64,
    /// Per-model weights indexed by model id; missing entries weigh 1.
    #[serde(default)]
    pub model_weights: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.55,
            num_models: 1,
            rescale: RescaleMode::ClampedCount,
            score_floor: 0.0,
            model_weights: Vec::new(),
        }
    }
}

impl FusionConfig {
    pub fn with_models(num_models: usize) -> Self {
        Self {
            num_models,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(FusionError::Config(format!(
                "match_iou {} not in (0, 1)",
                self.match_iou
            )));
        }
        if self.num_models == 0 {
            return Err(FusionError::Config("num_models must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(FusionError::Config(format!(
                "score_floor {} not in [0, 1)",
                self.score_floor
            )));
        }
        if let Some(w) = self.model_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(FusionError::Config(format!("model weight {w} must be positive")));
        }
        Ok(())
    }

    fn weight(&self, model: u32) -> f64 {
        self.model_weights.get(model as usize).copied().unwrap_or(1.0)
    }
}

/// Boxes matched together plus their running fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCluster {
    members: Vec<ScoredDetection>,
    weights: Vec<f64>,
    fused: ScoredDetection,
}

impl FusionCluster {
    fn seed(det: ScoredDetection, weight: f64) -> Self {
        Self {
            members: vec![det],
            weights: vec![weight],
            fused: det,
        }
    }

    fn push(&mut self, det: ScoredDetection, weight: f64) {
        debug_assert_eq!(det.category, self.fused.category);
        self.members.push(det);
        self.weights.push(weight);
        self.fused = fuse_members(&self.members, &self.weights);
    }

    pub fn members(&self) -> &[ScoredDetection] {
        &self.members
    }

    /// The fused box before any score rescaling.
    pub fn fused(&self) -> &ScoredDetection {
        &self.fused
    }

    pub fn category(&self) -> u32 {
        self.fused.category
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Mean member score; coordinates averaged with member scores as weights.
fn fuse_members(members: &[ScoredDetection], weights: &[f64]) -> ScoredDetection {
    let mut weight_sum = 0.0;
    let mut weighted_score = 0.0;
    let mut coord_weight = 0.0;
    let mut coords = [0.0f64; 4];
    for (m, &w) in members.iter().zip(weights) {
        weight_sum += w;
        let ws = w * m.score;
        weighted_score += ws;
        coord_weight += ws;
        for (acc, c) in coords.iter_mut().zip(m.bbox.corners()) {
            *acc += ws * c;
        }
    }
    if coord_weight > 0.0 {
        coords.iter_mut().for_each(|c| *c /= coord_weight);
    } else {
        // all-zero scores: fall back to the unweighted mean
        coords = [0.0; 4];
        for m in members {
            for (acc, c) in coords.iter_mut().zip(m.bbox.corners()) {
                *acc += c;
            }
        }
        let n = members.len() as f64;
        coords.iter_mut().for_each(|c| *c /= n);
    }
    // weighted means of valid boxes are valid up to rounding
    let [x0, y0, x1, y1] = coords;
    let bbox = BBox::new(x0, y0, x1.max(x0), y1.max(y0)).expect("weighted mean of finite boxes");
    let lead = members[0];
    ScoredDetection {
        bbox,
        score: (weighted_score / weight_sum).clamp(0.0, 1.0),
        category: lead.category,
        model: lead.model,
        image: lead.image,
    }
}

fn check_single_image(dets: &[ScoredDetection]) -> Result<(), FusionError> {
    if let Some(first) = dets.first() {
        if let Some(other) = dets.iter().find(|d| d.image != first.image) {
            return Err(FusionError::MixedImages(first.image, other.image));
        }
    }
    Ok(())
}

/// Input order for greedy passes: descending score, then model id, then position.
fn score_order(dets: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].model.cmp(&dets[b].model))
            .then(a.cmp(&b))
    });
    order
}

fn by_score_desc(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Runs the clustering pass of weighted box fusion and returns the clusters
/// in creation order.
pub fn wbf_clusters(dets: &[ScoredDetection], cfg: &FusionConfig) -> Result<Vec<FusionCluster>, FusionError> {
    cfg.validate()?;
    check_single_image(dets)?;
    let mut clusters: Vec<FusionCluster> = Vec::new();
    for i in score_order(dets) {
        let det = dets[i];
        let weight = cfg.weight(det.model);
        match clusters
            .iter_mut()
            .find(|c| c.category() == det.category && c.fused.bbox.iou(&det.bbox) > cfg.match_iou)
        {
            Some(c) => c.push(det, weight),
            None => clusters.push(FusionCluster::seed(det, weight)),
        }
    }
    Ok(clusters)
}

/// Weighted box fusion of one image's detections.
pub fn wbf_fuse(dets: &[ScoredDetection], cfg: &FusionConfig) -> Result<Vec<ScoredDetection>, FusionError> {
    let clusters = wbf_clusters(dets, cfg)?;
    let m = cfg.num_models as f64;
    let mut out: Vec<ScoredDetection> = clusters
        .iter()
        .map(|c| {
            let mut f = *c.fused();
            if cfg.rescale == RescaleMode::ClampedCount {
                f.score *= (c.len() as f64).min(m) / m;
            }
            f
        })
        .filter(|f| f.score >= cfg.score_floor)
        .collect();
    out.sort_by(by_score_desc);
    Ok(out)
}

/// Greedy per-category NMS: a box is dropped when its IoU with an already
/// kept box of the same category is at least `iou_thresh`.
pub fn nms(dets: &[ScoredDetection], iou_thresh: f64) -> Result<Vec<ScoredDetection>, FusionError> {
    check_single_image(dets)?;
    let mut kept: Vec<ScoredDetection> = Vec::new();
    for i in score_order(dets) {
        let d = dets[i];
        if !kept
            .iter()
            .any(|k| k.category == d.category && k.bbox.iou(&d.bbox) >= iou_thresh)
        {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftNmsMethod {
    /// `s * (1 - IoU)` when IoU exceeds the threshold.
    Linear,
    /// `s * exp(-IoU^2 / sigma)`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    pub iou_thresh: f64,
    pub method: SoftNmsMethod,
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            method: SoftNmsMethod::Linear,
            sigma: 0.5,
            score_floor: 0.001,
        }
    }
}

/// Soft-NMS: overlapping boxes are down-weighted instead of removed.
pub fn soft_nms(dets: &[ScoredDetection], cfg: &SoftNmsConfig) -> Result<Vec<ScoredDetection>, FusionError> {
    check_single_image(dets)?;
    if cfg.method == SoftNmsMethod::Gaussian && cfg.sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(FusionError::Config(format!("sigma {} must be positive", cfg.sigma)));
    }
    let mut pool: Vec<ScoredDetection> = score_order(dets).into_iter().map(|i| dets[i]).collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        // first maximum keeps the score-order tie break
        let best = pool
            .iter()
            .enumerate()
            .fold(0, |bi, (i, d)| if d.score > pool[bi].score { i } else { bi });
        let top = pool.remove(best);
        if top.score < cfg.score_floor {
            break;
        }
        for d in pool.iter_mut().filter(|d| d.category == top.category) {
            let iou = top.bbox.iou(&d.bbox);
            let decay = match cfg.method {
                SoftNmsMethod::Linear if iou > cfg.iou_thresh => 1.0 - iou,
                SoftNmsMethod::Linear => 1.0,
                SoftNmsMethod::Gaussian => (-(iou * iou) / cfg.sigma).exp(),
            };
            d.score *= decay;
        }
        out.push(top);
    }
    Ok(out)
}

/// Applies `per_image` to every image of the concatenated inputs. Images are
/// processed in parallel on the current rayon pool; output order is by image
/// id, so the result does not depend on the schedule.
pub fn combine_per_image<F>(files: &[DetectionFile], per_image: F) -> Result<DetectionFile, FusionError>
where
    F: Fn(&[ScoredDetection]) -> Result<Vec<ScoredDetection>, FusionError> + Sync,
{
    if files.is_empty() {
        return Err(FusionError::NoInputs);
    }
    let mut images: BTreeMap<u64, Vec<ScoredDetection>> = BTreeMap::new();
    for f in files {
        for d in &f.detections {
            images.entry(d.image).or_default().push(*d);
        }
    }
    let model = files.iter().map(|f| f.model).max().unwrap_or(0) + 1;
    let groups: Vec<(u64, Vec<ScoredDetection>)> = images.into_iter().collect();
    let fused = groups
        .par_iter()
        .map(|(_, dets)| per_image(dets))
        .collect::<Result<Vec<_>, _>>()?;
    let detections = fused
        .into_iter()
        .flatten()
        .map(|mut d| {
            d.model = model;
            d
        })
        .collect();
    Ok(DetectionFile { model, detections })
}

/// The ensemble step: per image, pool every model's detections and fuse them.
pub fn ensemble(files: &[DetectionFile], cfg: &FusionConfig) -> Result<DetectionFile, FusionError> {
    if files.is_empty() {
        return Err(FusionError::NoInputs);
    }
    if cfg.num_models != files.len() {
        return Err(FusionError::ModelCountMismatch {
            expected: cfg.num_models,
            found: files.len(),
        });
    }
    cfg.validate()?;
    combine_per_image(files, |dets| wbf_fuse(dets, cfg))
}
