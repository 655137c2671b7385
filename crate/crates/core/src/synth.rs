//! Synthetic scenes and detector simulation.
//!
//! A [`DetectorProfile`] describes how a detector fails: how often it misses
//! an object, how noisy its corners are and how many spurious boxes it
//! emits. Two presets model the usual trade-off between a precise detector
//! that misses objects and a high-recall detector with sloppier boxes;
//! [`run_ensemble_experiment`] measures what fusing them buys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::formats::{Dataset, DetectionFile, ImageInfo};
use crate::fusion::{ensemble, FusionConfig, FusionError};
use crate::geometry::{BBox, CategoryTable, GroundTruthBox, ScoredDetection};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Scene(String),
    #[error("invalid detector profile: {0}")]
    Profile(String),
    #[error("experiment needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_images: usize,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative frequency of each class; class ids are 1-based positions.
    pub class_weights: Vec<f64>,
    /// Object side lengths are log-uniform in this range (pixels).
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            width: 960,
            height: 540,
            min_objects: 5,
            max_objects: 25,
            class_weights: vec![0.30, 0.15, 0.12, 0.10, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03],
            min_size: 24.0,
            max_size: 160.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Scene(m));
        if self.class_weights.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return bad(format!(
                "class weights {:?} do not form a distribution",
                self.class_weights
            ));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size.is_finite()) {
            return bad(format!(
                "size range [{}, {}] is not positive",
                self.min_size, self.max_size
            ));
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return bad(format!(
                "max_size {} does not fit a {}x{} image",
                self.max_size, self.width, self.height
            ));
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "object range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        Ok(())
    }

    pub fn categories(&self) -> CategoryTable {
        CategoryTable::new(
            (1..=self.class_weights.len() as u32)
                .map(|i| (i, format!("class{i}")))
                .collect(),
        )
        .expect("sequential ids are unique")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorProfile {
    pub miss_rate: f64,
    /// Standard deviation of the independent per-corner noise, pixels.
    pub jitter_sigma: f64,
    /// Expected spurious boxes per image (Poisson).
    pub fp_rate: f64,
    pub tp_score: ScoreModel,
    pub fp_score: ScoreModel,
    pub label_noise: f64,
    /// Side-length range of spurious boxes (log-uniform, pixels).
    pub fp_size: (f64, f64),
}

impl Default for DetectorProfile {
    fn default() -> Self {
        Self::multi_stage()
    }
}

impl DetectorProfile {
    fn base() -> Self {
        Self {
            miss_rate: 0.0,
            jitter_sigma: 0.0,
            fp_rate: 0.0,
            tp_score: ScoreModel { mean: 0.8, std: 0.1 },
            fp_score: ScoreModel { mean: 0.3, std: 0.1 },
            label_noise: 0.0,
            fp_size: (24.0, 160.0),
        }
    }

    /// Precise boxes, many misses.
    pub fn multi_stage() -> Self {
        Self {
            miss_rate: 0.30,
            jitter_sigma: 1.0,
            fp_rate: 0.5,
            ..Self::base()
        }
    }

    /// Few misses, noisy boxes and more spurious detections.
    pub fn single_stage() -> Self {
        Self {
            miss_rate: 0.05,
            jitter_sigma: 6.0,
            fp_rate: 3.0,
            ..Self::base()
        }
    }

    /// Every object found exactly, with score 1.
    pub fn perfect() -> Self {
        Self {
            tp_score: ScoreModel { mean: 1.0, std: 0.0 },
            ..Self::base()
        }
    }

    pub fn all_miss() -> Self {
        Self {
            miss_rate: 1.0,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.miss_rate) || !prob(self.label_noise) {
            return Err(SynthError::Profile(
                "miss_rate and label_noise must lie in [0, 1]".into(),
            ));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite())
            || !(self.fp_rate >= 0.0 && self.fp_rate.is_finite())
        {
            return Err(SynthError::Profile(
                "jitter_sigma and fp_rate must be finite and non-negative".into(),
            ));
        }
        for s in [self.tp_score, self.fp_score] {
            if !(s.std >= 0.0 && s.std.is_finite() && s.mean.is_finite()) {
                return Err(SynthError::Profile(format!("bad score model {s:?}")));
            }
        }
        if !(self.fp_size.0 > 0.0 && self.fp_size.0 <= self.fp_size.1 && self.fp_size.1.is_finite()) {
            return Err(SynthError::Profile(format!("bad fp_size {:?}", self.fp_size)));
        }
        Ok(())
    }
}

/// Seeded generator for one (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

fn weighted_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Gaussian restricted to [0, 1] by rejection, clamped if rejection stalls.
fn truncated_score(rng: &mut impl Rng, m: ScoreModel) -> f64 {
    if m.std == 0.0 {
        return m.mean.clamp(0.0, 1.0);
    }
    let normal = Normal::new(m.mean, m.std).expect("validated std");
    for _ in 0..64 {
        let v = normal.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    m.mean.clamp(0.0, 1.0)
}

/// Generates a dataset of random axis-aligned boxes. Image `i` draws from
/// its own stream so scenes are reproducible one by one.
pub fn generate_scenes(cfg: &SceneConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut ground_truth = Vec::new();
    for i in 0..cfg.num_images {
        let id = i as u64 + 1;
        images.push(ImageInfo {
            id,
            width: cfg.width,
            height: cfg.height,
            file_name: format!("synth_{id:06}.png"),
        });
        let mut rng = stream_rng(cfg.seed, id);
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        for _ in 0..n {
            let category = weighted_index(&mut rng, &cfg.class_weights) as u32 + 1;
            let w = log_uniform(&mut rng, cfg.min_size, cfg.max_size);
            let h = log_uniform(&mut rng, cfg.min_size, cfg.max_size);
            let x = rng.random_range(0.0..=cfg.width as f64 - w);
            let y = rng.random_range(0.0..=cfg.height as f64 - h);
            let bbox = BBox::from_xywh(x, y, w, h).expect("sizes validated positive");
            ground_truth.push(GroundTruthBox::new(bbox, category, id));
        }
    }
    Ok(Dataset {
        images,
        categories: cfg.categories(),
        ground_truth,
    })
}

/// Simulates one detector over a dataset. Detection streams are keyed by
/// image id so the result is independent of evaluation order.
pub fn simulate_detector(
    ds: &Dataset,
    prof: &DetectorProfile,
    model: u32,
    seed: u64,
) -> Result<DetectionFile, SynthError> {
    prof.validate()?;
    let category_ids: Vec<u32> = ds.categories.ids().collect();
    let jitter = Normal::new(0.0, prof.jitter_sigma).expect("validated sigma");
    let poisson = (prof.fp_rate > 0.0).then(|| Poisson::new(prof.fp_rate).expect("validated rate"));
    let by_image = ds.gt_by_image();
    let mut detections = Vec::new();
    for img in &ds.images {
        let mut rng = stream_rng(seed, img.id);
        let (w, h) = (img.width as f64, img.height as f64);
        for g in by_image.get(&img.id).into_iter().flatten() {
            if g.crowd || rng.random_bool(prof.miss_rate) {
                continue;
            }
            let mut c = g.bbox.corners();
            if prof.jitter_sigma > 0.0 {
                for v in c.iter_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
            let (x0, x1) = (c[0].min(c[2]).clamp(0.0, w), c[0].max(c[2]).clamp(0.0, w));
            let (y0, y1) = (c[1].min(c[3]).clamp(0.0, h), c[1].max(c[3]).clamp(0.0, h));
            let mut category = g.category;
            if category_ids.len() > 1 && rng.random_bool(prof.label_noise) {
                let others: Vec<u32> = category_ids.iter().copied().filter(|c| *c != g.category).collect();
                category = others[rng.random_range(0..others.len())];
            }
            let score = truncated_score(&mut rng, prof.tp_score);
            let bbox = BBox::new(x0, y0, x1, y1).expect("sorted clamped corners");
            detections.push(ScoredDetection::new(bbox, score, category, model, img.id).expect("score in [0, 1]"));
        }
        let spurious = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..spurious {
            if category_ids.is_empty() {
                break;
            }
            let bw = log_uniform(&mut rng, prof.fp_size.0, prof.fp_size.1).min(w);
            let bh = log_uniform(&mut rng, prof.fp_size.0, prof.fp_size.1).min(h);
            let x = rng.random_range(0.0..=(w - bw).max(0.0));
            let y = rng.random_range(0.0..=(h - bh).max(0.0));
            let category = category_ids[rng.random_range(0..category_ids.len())];
            let score = truncated_score(&mut rng, prof.fp_score);
            let bbox = BBox::from_xywh(x, y, bw, bh).expect("positive size");
            detections.push(ScoredDetection::new(bbox, score, category, model, img.id).expect("score in [0, 1]"));
        }
    }
    Ok(DetectionFile { model, detections })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub map_c: f64,
    pub map_50: f64,
    pub map_75: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            map_c: r.map_c,
            map_50: r.map_50,
            map_75: r.map_75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub a: Metrics,
    pub b: Metrics,
    pub fused: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub map_c: MeanStd,
    pub map_50: MeanStd,
    pub map_75: MeanStd,
}

impl Summary {
    fn of(ms: &[Metrics]) -> Self {
        let stat = |f: fn(&Metrics) -> f64| {
            let n = ms.len() as f64;
            let mean = ms.iter().map(f).sum::<f64>() / n;
            let var = if ms.len() > 1 {
                ms.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            MeanStd { mean, std: var.sqrt() }
        };
        Self {
            map_c: stat(|m| m.map_c),
            map_50: stat(|m| m.map_50),
            map_75: stat(|m| m.map_75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub trials: Vec<TrialResult>,
    pub a: Summary,
    pub b: Summary,
    pub fused: Summary,
}

impl ExperimentReport {
    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>15} {:>15} {:>15}", "model", "map_c", "map_50", "map_75");
        for (name, m) in [("A", &self.a), ("B", &self.b), ("fused", &self.fused)] {
            let cell = |v: MeanStd| format!("{:.1} ± {:.1}", 100.0 * v.mean, 100.0 * v.std);
            let _ = writeln!(
                s,
                "{:<8} {:>15} {:>15} {:>15}",
                name,
                cell(m.map_c),
                cell(m.map_50),
                cell(m.map_75)
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub a: DetectorProfile,
    pub b: DetectorProfile,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            a: DetectorProfile::multi_stage(),
            b: DetectorProfile::single_stage(),
            fusion: FusionConfig::with_models(2),
            eval: EvalConfig::default(),
            trials: 20,
            seed: 0,
        }
    }
}

/// One trial: fresh scenes, both detectors, and their fusion, each scored.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult, SynthError> {
    // distinct streams per trial and per role
    let base = cfg.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let scene = SceneConfig {
        seed: base,
        ..cfg.scene.clone()
    };
    let ds = generate_scenes(&scene)?;
    let a = simulate_detector(&ds, &cfg.a, 0, base.wrapping_add(1))?;
    let b = simulate_detector(&ds, &cfg.b, 1, base.wrapping_add(2))?;
    let fusion = FusionConfig {
        num_models: 2,
        ..cfg.fusion.clone()
    };
    let fused = ensemble(&[a.clone(), b.clone()], &fusion)?;
    Ok(TrialResult {
        trial,
        a: Metrics::from(&evaluate(&a, &ds, &cfg.eval)?),
        b: Metrics::from(&evaluate(&b, &ds, &cfg.eval)?),
        fused: Metrics::from(&evaluate(&fused, &ds, &cfg.eval)?),
    })
}

/// Runs `cfg.trials` independent trials (in parallel on the current rayon
/// pool) and summarizes them.
pub fn run_ensemble_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, SynthError> {
    if cfg.trials == 0 {
        return Err(SynthError::NoTrials);
    }
    cfg.scene.validate()?;
    cfg.a.validate()?;
    cfg.b.validate()?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = |f: fn(&TrialResult) -> Metrics| trials.iter().map(f).collect::<Vec<_>>();
    Ok(ExperimentReport {
        a: Summary::of(&pick(|t| t.a)),
        b: Summary::of(&pick(|t| t.b)),
        fused: Summary::of(&pick(|t| t.fused)),
        trials,
    })
}
