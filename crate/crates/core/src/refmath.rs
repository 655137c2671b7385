//! Reference implementations of two-stage and center-point detector losses
//! and target encodings, with analytic gradients.
//!
//! Everything here works on plain numbers and small grids; there are no
//! trainable parameters. The functions are exercised by the test-suite and
//! by `detfuse refmath check`.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefmathError {
    #[error("probability of the true label is {0}; log-loss is infinite")]
    ZeroProbability(f64),
    #[error("probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("length mismatch: {0} predictions for {1} targets")]
    LengthMismatch(usize, usize),
    #[error("loss over an empty set of targets")]
    Empty,
    #[error("heatmap value {0} outside [0, 1]")]
    HeatmapRange(f64),
    #[error("heatmap shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("output stride must be at least 1")]
    BadStride,
    #[error("sigma {0} must be positive")]
    BadSigma(f64),
    #[error("cascade quality thresholds must be strictly increasing in (0, 1): {0:?}")]
    BadCascade(Vec<f64>),
    #[error("peak window must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Clamp applied to heatmap predictions before taking logs.
pub const FOCAL_EPS: f64 = 1e-12;

/// Lower bound on the size-adaptive Gaussian radius, in grid cells.
pub const MIN_SIGMA: f64 = 0.5;

/// Smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Box regression loss: smooth-L1 summed over the four corner differences.
pub fn bbox_reg_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.corners()
        .iter()
        .zip(gt.corners())
        .map(|(p, g)| smooth_l1(p - g))
        .sum()
}

/// Gradient of [`bbox_reg_loss`] with respect to the predicted corners.
pub fn bbox_reg_loss_grad(pred: &BBox, gt: &BBox) -> [f64; 4] {
    let (p, g) = (pred.corners(), gt.corners());
    std::array::from_fn(|i| smooth_l1_grad(p[i] - g[i]))
}

/// Regression loss summed over matched (prediction, ground truth) pairs.
pub fn regression_loss<'a>(pairs: impl IntoIterator<Item = (&'a BBox, &'a BBox)>) -> f64 {
    pairs.into_iter().map(|(p, g)| bbox_reg_loss(p, g)).sum()
}

/// Loss of one cascade stage: negative log-likelihood of the true label plus
/// box regression for foreground labels (`y >= 1`).
pub fn cascade_stage_loss(prob_true: f64, label: u32, pred: &BBox, gt: &BBox) -> Result<f64, RefmathError> {
    if prob_true == 0.0 {
        return Err(RefmathError::ZeroProbability(prob_true));
    }
    if !(prob_true > 0.0 && prob_true <= 1.0) {
        return Err(RefmathError::BadProbability(prob_true));
    }
    let cls = -prob_true.ln();
    let loc = if label >= 1 { bbox_reg_loss(pred, gt) } else { 0.0 };
    Ok(cls + loc)
}

/// Strictly increasing IoU quality targets of the cascade stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeStageConfig {
    thresholds: Vec<f64>,
}

impl CascadeStageConfig {
    pub fn new(thresholds: Vec<f64>) -> Result<Self, RefmathError> {
        let in_range = thresholds.iter().all(|q| *q > 0.0 && *q < 1.0);
        let increasing = thresholds.windows(2).all(|w| w[0] < w[1]);
        if thresholds.is_empty() || !in_range || !increasing {
            return Err(RefmathError::BadCascade(thresholds));
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn stages(&self) -> usize {
        self.thresholds.len()
    }
}

impl Default for CascadeStageConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.6, 0.7],
        }
    }
}

/// Applies the regressors in order: the first one sees `input`, every later
/// one sees its predecessor's output.
pub fn cascade_compose<F>(regressors: &[F], input: BBox) -> BBox
where
    F: Fn(&BBox) -> BBox,
{
    regressors.iter().fold(input, |b, r| r(&b))
}

/// Single-channel keypoint heatmap on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    stride: u32,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, stride: u32) -> Result<Self, RefmathError> {
        if stride == 0 {
            return Err(RefmathError::BadStride);
        }
        Ok(Self {
            width,
            height,
            stride,
            data: vec![0.0; width * height],
        })
    }

    /// Row-major values; every value must lie in `[0, 1]`.
    pub fn from_values(width: usize, height: usize, stride: u32, data: Vec<f64>) -> Result<Self, RefmathError> {
        if stride == 0 {
            return Err(RefmathError::BadStride);
        }
        if data.len() != width * height {
            return Err(RefmathError::ShapeMismatch((width, height), (data.len(), 1)));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RefmathError::HeatmapRange(*v));
        }
        Ok(Self {
            width,
            height,
            stride,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Ground-truth keypoint with its quantized cell and sub-cell offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeypointTarget {
    pub gt_point: (f64, f64),
    pub quantized: (i64, i64),
    pub sigma: f64,
    pub offset: (f64, f64),
    pub stride: u32,
}

impl KeypointTarget {
    pub fn new(gt_point: (f64, f64), stride: u32, sigma: f64) -> Result<Self, RefmathError> {
        if stride == 0 {
            return Err(RefmathError::BadStride);
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(RefmathError::BadSigma(sigma));
        }
        let r = stride as f64;
        let (gx, gy) = (gt_point.0 / r, gt_point.1 / r);
        let (qx, qy) = (gx.floor(), gy.floor());
        Ok(Self {
            gt_point,
            quantized: (qx as i64, qy as i64),
            sigma,
            offset: (gx - qx, gy - qy),
            stride,
        })
    }

    /// Center keypoint of a box with the size-adaptive sigma.
    pub fn from_box(b: &BBox, stride: u32) -> Result<Self, RefmathError> {
        if stride == 0 {
            return Err(RefmathError::BadStride);
        }
        let r = stride as f64;
        Self::new(b.center(), stride, adaptive_sigma(b.width() / r, b.height() / r))
    }
}

/// Gaussian spread for an object of the given size in grid cells:
/// `max(0.5, r / 3)` with `r = (w + h) / 4`.
pub fn adaptive_sigma(w_grid: f64, h_grid: f64) -> f64 {
    ((w_grid + h_grid) / 4.0 / 3.0).max(MIN_SIGMA)
}

/// Object size target, stored as absolute width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeTarget {
    pub category: u32,
    pub wh: (f64, f64),
}

impl SizeTarget {
    pub fn from_box(category: u32, b: &BBox) -> Self {
        Self {
            category,
            wh: (b.width(), b.height()),
        }
    }
}

/// Splats one Gaussian per object onto a `width x height` grid. Each object
/// peaks at exactly 1 on its quantized cell; overlaps keep the maximum.
pub fn render_heatmap(
    objects: &[((f64, f64), f64)],
    width: usize,
    height: usize,
    stride: u32,
) -> Result<Heatmap, RefmathError> {
    let mut hm = Heatmap::zeros(width, height, stride)?;
    for &(point, sigma) in objects {
        let t = KeypointTarget::new(point, stride, sigma)?;
        let (kx, ky) = (t.quantized.0 as f64, t.quantized.1 as f64);
        let denom = 2.0 * sigma * sigma;
        for y in 0..height {
            let dy = y as f64 - ky;
            for x in 0..width {
                let dx = x as f64 - kx;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cell = &mut hm.data[y * width + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(hm)
}

fn check_pair(pred: &Heatmap, gt: &Heatmap) -> Result<(), RefmathError> {
    if pred.shape() != gt.shape() {
        return Err(RefmathError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    Ok(())
}

/// Per-cell focal term and its derivative with respect to the prediction.
fn focal_cell(p: f64, g: f64) -> (f64, f64) {
    if g == 1.0 {
        if p == 1.0 {
            return (0.0, 0.0);
        }
        let clamped = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let q = 1.0 - clamped;
        let term = q * q * clamped.ln();
        let d = if clamped == p {
            -2.0 * q * clamped.ln() + q * q / clamped
        } else {
            0.0
        };
        (term, d)
    } else {
        if p == 0.0 {
            return (0.0, 0.0);
        }
        let clamped = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let w = (1.0 - g).powi(4);
        let l1p = (1.0 - clamped).ln();
        let term = w * clamped * clamped * l1p;
        let d = if clamped == p {
            w * (2.0 * clamped * l1p - clamped * clamped / (1.0 - clamped))
        } else {
            0.0
        };
        (term, d)
    }
}

/// Penalty-reduced focal loss over a predicted and a target heatmap,
/// normalized by the keypoint count `k`.
pub fn focal_keypoint_loss(pred: &Heatmap, gt: &Heatmap, k: usize) -> Result<f64, RefmathError> {
    check_pair(pred, gt)?;
    if k == 0 {
        return Err(RefmathError::Empty);
    }
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(&p, &g)| focal_cell(p, g).0).sum();
    Ok((-sum / k as f64).max(0.0))
}

/// Gradient of [`focal_keypoint_loss`] with respect to each predicted cell.
/// Cells at the clamp limits have zero gradient.
pub fn focal_keypoint_loss_grad(pred: &Heatmap, gt: &Heatmap, k: usize) -> Result<Vec<f64>, RefmathError> {
    check_pair(pred, gt)?;
    if k == 0 {
        return Err(RefmathError::Empty);
    }
    let scale = -1.0 / k as f64;
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| scale * focal_cell(p, g).1)
        .collect())
}

fn aligned<A, B>(a: &[A], b: &[B]) -> Result<(), RefmathError> {
    if a.len() != b.len() {
        return Err(RefmathError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(RefmathError::Empty);
    }
    Ok(())
}

fn offset_residual(pred: (f64, f64), t: &KeypointTarget) -> (f64, f64) {
    let r = t.stride as f64;
    (
        pred.0 + t.quantized.0 as f64 - t.gt_point.0 / r,
        pred.1 + t.quantized.1 as f64 - t.gt_point.1 / r,
    )
}

/// Mean L1 error of predicted sub-cell offsets.
pub fn offset_loss(pred: &[(f64, f64)], targets: &[KeypointTarget]) -> Result<f64, RefmathError> {
    aligned(pred, targets)?;
    let sum: f64 = pred
        .iter()
        .zip(targets)
        .map(|(&p, t)| {
            let (dx, dy) = offset_residual(p, t);
            dx.abs() + dy.abs()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn offset_loss_grad(pred: &[(f64, f64)], targets: &[KeypointTarget]) -> Result<Vec<(f64, f64)>, RefmathError> {
    aligned(pred, targets)?;
    let k = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(&p, t)| {
            let (dx, dy) = offset_residual(p, t);
            (dx.signum() / k, dy.signum() / k)
        })
        .collect())
}

/// Mean L1 error of predicted widths and heights.
pub fn size_loss(pred: &[(f64, f64)], targets: &[SizeTarget]) -> Result<f64, RefmathError> {
    aligned(pred, targets)?;
    let sum: f64 = pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (p.0 - t.wh.0).abs() + (p.1 - t.wh.1).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn size_loss_grad(pred: &[(f64, f64)], targets: &[SizeTarget]) -> Result<Vec<(f64, f64)>, RefmathError> {
    aligned(pred, targets)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| ((p.0 - t.wh.0).signum() / n, (p.1 - t.wh.1).signum() / n))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub size: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { size: 0.1, offset: 1.0 }
    }
}

/// `keypoint + w.size * size + w.offset * offset`
pub fn combined_centernet_loss(keypoint: f64, size: f64, offset: f64, w: LossWeights) -> f64 {
    keypoint + w.size * size + w.offset * offset
}

/// Turns a peak cell, its offset and its size (all in grid units) into a box
/// in input pixels.
pub fn decode_center(point: (f64, f64), offset: (f64, f64), wh: (f64, f64), stride: u32) -> Result<BBox, RefmathError> {
    if stride == 0 {
        return Err(RefmathError::BadStride);
    }
    let r = stride as f64;
    let cx = point.0 + offset.0;
    let cy = point.1 + offset.1;
    let (hw, hh) = (wh.0 / 2.0, wh.1 / 2.0);
    Ok(BBox::new((cx - hw) * r, (cy - hh) * r, (cx + hw) * r, (cy + hh) * r)?)
}

/// A grid cell `(x, y)` and its heatmap value.
pub type Peak = ((usize, usize), f64);

/// Local maxima of the heatmap: cells strictly greater than every other cell
/// of their `window x window` neighborhood and greater than zero. Returns at
/// most `k`, highest first.
pub fn peak_pick(h: &Heatmap, k: usize, window: usize) -> Result<Vec<Peak>, RefmathError> {
    if window.is_multiple_of(2) {
        return Err(RefmathError::BadWindow(window));
    }
    let half = (window / 2) as isize;
    let mut peaks = Vec::new();
    for y in 0..h.height {
        for x in 0..h.width {
            let v = h.get(x, y);
            if v <= 0.0 {
                continue;
            }
            let mut is_peak = true;
            'scan: for dy in -half..=half {
                for dx in -half..=half {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= h.width as isize || ny >= h.height as isize {
                        continue;
                    }
                    if h.get(nx as usize, ny as usize) >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push(((x, y), v));
            }
        }
    }
    // stable: equal scores stay in raster order
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(k);
    Ok(peaks)
}
