//! Cut-paste augmentation.
//!
//! Object instances are cropped out of a dataset's own images (using the
//! polygon segmentation as a mask when there is one, the full rectangle
//! otherwise) and composited onto scene images, which gain one ground-truth
//! box per pasted object.

use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{Dataset, ImageInfo};
use crate::geometry::{BBox, GroundTruthBox};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("instance bank is empty")]
    EmptyBank,
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Where scene pixels come from.
pub trait RasterSource: Sync {
    fn load(&self, image: &ImageInfo) -> Result<RgbImage, String>;
}

/// Reads `file_name` relative to a directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl RasterSource for DirSource {
    fn load(&self, image: &ImageInfo) -> Result<RgbImage, String> {
        let path = self.root.join(&image.file_name);
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl RasterSource for std::collections::BTreeMap<u64, RgbImage> {
    fn load(&self, image: &ImageInfo) -> Result<RgbImage, String> {
        self.get(&image.id)
            .cloned()
            .ok_or_else(|| format!("no raster for image {}", image.id))
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub category: u32,
    pub patch: RgbImage,
    /// 255 inside the object, 0 outside; same size as `patch`.
    pub mask: GrayImage,
    pub source_image: u64,
    pub original_box: BBox,
    /// Segmentation polygons relative to the patch origin.
    pub polygons: Option<Vec<Vec<f64>>>,
}

/// Harvested instances, ordered by category then harvest order.
#[derive(Debug, Clone, Default)]
pub struct InstanceBank {
    instances: Vec<Instance>,
}

impl InstanceBank {
    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn categories(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.instances.iter().map(|i| i.category).collect();
        c.dedup();
        c
    }

    pub fn of_category(&self, category: u32) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.category == category)
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[f64]) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes polygons (patch-relative) by pixel-center sampling.
fn polygon_mask(w: u32, h: u32, polys: &[Vec<f64>]) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        let hit = polys.iter().any(|p| point_in_polygon(cx, cy, p));
        Luma([if hit { 255 } else { 0 }])
    })
}

/// Pixel rectangle covered by a box after rounding, clamped to the raster.
fn pixel_rect(b: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let clamp_x = |v: f64| v.round().clamp(0.0, width as f64) as u32;
    let clamp_y = |v: f64| v.round().clamp(0.0, height as f64) as u32;
    let (x0, x1) = (clamp_x(b.x_tl()), clamp_x(b.x_br()));
    let (y0, y1) = (clamp_y(b.y_tl()), clamp_y(b.y_br()));
    (x0, y0, x1 - x0, y1 - y0)
}

/// Crops one instance per non-crowd ground-truth box. Unreadable rasters and
/// boxes that round to zero area are skipped and reported as warnings.
pub fn extract_instances(ds: &Dataset, source: &dyn RasterSource) -> (InstanceBank, Vec<String>) {
    let mut warnings = Vec::new();
    let mut instances = Vec::new();
    let by_image = ds.gt_by_image();
    for img in &ds.images {
        let Some(gts) = by_image.get(&img.id) else { continue };
        let raster = match source.load(img) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("image {}: unreadable raster, skipped: {e}", img.id));
                continue;
            }
        };
        for g in gts.iter().filter(|g| !g.crowd) {
            let (x0, y0, w, h) = pixel_rect(&g.bbox, raster.width(), raster.height());
            if w == 0 || h == 0 {
                warnings.push(format!(
                    "image {}: zero-area box {:?} skipped",
                    img.id,
                    g.bbox.corners()
                ));
                continue;
            }
            let patch = imageops::crop_imm(&raster, x0, y0, w, h).to_image();
            let polygons = g.segmentation.as_ref().map(|polys| {
                polys
                    .iter()
                    .map(|p| {
                        p.chunks_exact(2)
                            .flat_map(|xy| [xy[0] - x0 as f64, xy[1] - y0 as f64])
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>()
            });
            let mask = match &polygons {
                Some(p) => {
                    let m = polygon_mask(w, h, p);
                    if m.pixels().any(|v| v.0[0] > 0) {
                        m
                    } else {
                        GrayImage::from_pixel(w, h, Luma([255]))
                    }
                }
                None => GrayImage::from_pixel(w, h, Luma([255])),
            };
            instances.push(Instance {
                category: g.category,
                patch,
                mask,
                source_image: img.id,
                original_box: g.bbox,
                polygons,
            });
        }
    }
    instances.sort_by_key(|i| i.category);
    (InstanceBank { instances }, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteOptions {
    /// Pick a category uniformly first, then an instance of it.
    pub balanced: bool,
    pub allow_overlap: bool,
    /// With `allow_overlap = false`, a placement is rejected when its IoU
    /// with any existing box exceeds this.
    pub overlap_iou_cap: f64,
    /// Uniform scale factor range; `(1, 1)` disables rescaling.
    pub scale_jitter: (f64, f64),
    /// Soften mask edges with a 3x3 Gaussian (inside the mask only).
    pub feather: bool,
    pub retry_cap: usize,
}

impl Default for PasteOptions {
    fn default() -> Self {
        Self {
            balanced: false,
            allow_overlap: true,
            overlap_iou_cap: 0.0,
            scale_jitter: (1.0, 1.0),
            feather: false,
            retry_cap: 20,
        }
    }
}

/// Where one instance ended up.
#[derive(Debug, Clone)]
pub struct Placement {
    pub x: u32,
    pub y: u32,
    pub mask: GrayImage,
    pub category: u32,
}

#[derive(Debug, Clone)]
pub struct Composite {
    pub raster: RgbImage,
    /// Scene boxes followed by one box per pasted instance.
    pub ground_truth: Vec<GroundTruthBox>,
    pub placements: Vec<Placement>,
    pub warnings: Vec<String>,
}

fn pick<'a>(bank: &'a InstanceBank, balanced: bool, rng: &mut impl Rng) -> &'a Instance {
    if balanced {
        let cats = bank.categories();
        let c = cats[rng.random_range(0..cats.len())];
        let members: Vec<&Instance> = bank.of_category(c).collect();
        members[rng.random_range(0..members.len())]
    } else {
        &bank.instances[rng.random_range(0..bank.instances.len())]
    }
}

fn feathered_alpha(mask: &GrayImage) -> Vec<f64> {
    const K: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let (w, h) = mask.dimensions();
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask.get_pixel(x as u32, y as u32).0[0] > 0
    };
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(x, y) {
                continue;
            }
            let mut acc = 0.0;
            for (dy, row) in K.iter().enumerate() {
                for (dx, k) in row.iter().enumerate() {
                    if inside(x + dx as i64 - 1, y + dy as i64 - 1) {
                        acc += k;
                    }
                }
            }
            out[(y as u32 * w + x as u32) as usize] = acc / 16.0;
        }
    }
    out
}

/// Pastes `n` bank instances onto a copy of `scene`. Pasted boxes and the
/// scene's own boxes are tagged with `image_id`.
pub fn paste_compose(
    scene: &RgbImage,
    scene_gts: &[GroundTruthBox],
    image_id: u64,
    bank: &InstanceBank,
    n: usize,
    rng: &mut impl Rng,
    opts: &PasteOptions,
) -> Result<Composite, AugmentError> {
    if bank.is_empty() {
        return Err(AugmentError::EmptyBank);
    }
    let (sw, sh) = scene.dimensions();
    let mut raster = scene.clone();
    let mut ground_truth: Vec<GroundTruthBox> = scene_gts
        .iter()
        .cloned()
        .map(|mut g| {
            g.image = image_id;
            g
        })
        .collect();
    let mut placements = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    let (lo, hi) = opts.scale_jitter;

    'objects: for slot in 0..n {
        for _ in 0..opts.retry_cap.max(1) {
            let inst = pick(bank, opts.balanced, rng);
            let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (pw, ph) = inst.patch.dimensions();
            let (w, h) = if factor == 1.0 {
                (pw, ph)
            } else {
                (
                    ((pw as f64 * factor).round() as u32).max(1),
                    ((ph as f64 * factor).round() as u32).max(1),
                )
            };
            if w > sw || h > sh {
                continue;
            }
            let x = rng.random_range(0..=sw - w);
            let y = rng.random_range(0..=sh - h);
            let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
                .expect("integer placement inside the scene");
            if !opts.allow_overlap && ground_truth.iter().any(|g| g.bbox.iou(&bbox) > opts.overlap_iou_cap) {
                continue;
            }
            let (patch, mask) = if (w, h) == (pw, ph) {
                (inst.patch.clone(), inst.mask.clone())
            } else {
                (
                    imageops::resize(&inst.patch, w, h, imageops::FilterType::Nearest),
                    imageops::resize(&inst.mask, w, h, imageops::FilterType::Nearest),
                )
            };
            let alpha = if opts.feather {
                feathered_alpha(&mask)
            } else {
                mask.pixels().map(|p| if p.0[0] > 0 { 1.0 } else { 0.0 }).collect()
            };
            for py in 0..h {
                for px in 0..w {
                    let a = alpha[(py * w + px) as usize];
                    if a <= 0.0 {
                        continue;
                    }
                    let dst = raster.get_pixel_mut(x + px, y + py);
                    let src = patch.get_pixel(px, py);
                    if a >= 1.0 {
                        *dst = *src;
                    } else {
                        for c in 0..3 {
                            dst.0[c] = (a * src.0[c] as f64 + (1.0 - a) * dst.0[c] as f64).round() as u8;
                        }
                    }
                }
            }
            let segmentation = inst.polygons.as_ref().map(|polys| {
                polys
                    .iter()
                    .map(|p| {
                        p.chunks_exact(2)
                            .flat_map(|xy| [xy[0] * factor + x as f64, xy[1] * factor + y as f64])
                            .collect()
                    })
                    .collect()
            });
            ground_truth.push(GroundTruthBox {
                bbox,
                category: inst.category,
                image: image_id,
                crowd: false,
                segmentation,
            });
            placements.push(Placement {
                x,
                y,
                mask,
                category: inst.category,
            });
            continue 'objects;
        }
        warnings.push(format!(
            "image {image_id}: object {slot} not placed after {} attempts",
            opts.retry_cap.max(1)
        ));
    }
    Ok(Composite {
        raster,
        ground_truth,
        placements,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub per_source_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub paste: PasteOptions,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            per_source_images: 2,
            min_objects: 11,
            max_objects: 29,
            seed: 0,
            paste: PasteOptions::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.per_source_images == 0 {
            return Err(AugmentError::Config("per_source_images must be at least 1".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(AugmentError::Config(format!(
                "object range [{}, {}] is empty or starts at 0",
                self.min_objects, self.max_objects
            )));
        }
        let (lo, hi) = self.paste.scale_jitter;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(AugmentError::Config(format!(
                "scale jitter ({lo}, {hi}) is not a positive range"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedImage {
    pub info: ImageInfo,
    pub source_image: u64,
    pub raster: RgbImage,
    pub pasted: usize,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    /// Original images and boxes followed by the augmented ones.
    pub dataset: Dataset,
    pub images: Vec<AugmentedImage>,
    pub warnings: Vec<String>,
}

/// Per-image generator: the stream is selected by image id, so output does
/// not depend on which thread handles which image.
pub fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

fn stem(file_name: &str) -> &str {
    Path::new(file_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(file_name)
}

/// Creates `per_source_images` augmented copies of every image, each with a
/// uniform number of pasted objects in `[min_objects, max_objects]`.
pub fn augment_dataset(
    ds: &Dataset,
    source: &dyn RasterSource,
    cfg: &AugmentConfig,
) -> Result<Augmented, AugmentError> {
    cfg.validate()?;
    let (bank, mut warnings) = extract_instances(ds, source);
    if bank.is_empty() {
        warnings.push("no instances could be harvested; nothing to paste".into());
        return Ok(Augmented {
            dataset: ds.clone(),
            images: Vec::new(),
            warnings,
        });
    }
    let base_id = ds.next_image_id();
    let by_image = ds.gt_by_image();
    let per = cfg.per_source_images;

    let results: Vec<(Vec<AugmentedImage>, Vec<GroundTruthBox>, Vec<String>)> = ds
        .images
        .par_iter()
        .enumerate()
        .map(|(idx, img)| {
            let mut out = Vec::new();
            let mut gts = Vec::new();
            let mut warns = Vec::new();
            let scene = match source.load(img) {
                Ok(r) => r,
                Err(e) => {
                    warns.push(format!("image {}: unreadable scene, skipped: {e}", img.id));
                    return (out, gts, warns);
                }
            };
            let scene_gts: Vec<GroundTruthBox> = by_image
                .get(&img.id)
                .map(|v| v.iter().map(|g| (*g).clone()).collect())
                .unwrap_or_default();
            let mut rng = image_rng(cfg.seed, img.id);
            for k in 0..per {
                let new_id = base_id + (idx * per + k) as u64;
                let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
                let comp = paste_compose(&scene, &scene_gts, new_id, &bank, n, &mut rng, &cfg.paste)
                    .expect("bank checked non-empty");
                warns.extend(comp.warnings);
                let info = ImageInfo {
                    id: new_id,
                    width: comp.raster.width(),
                    height: comp.raster.height(),
                    file_name: format!("{}_aug{k}.png", stem(&img.file_name)),
                };
                gts.extend(comp.ground_truth);
                out.push(AugmentedImage {
                    info,
                    source_image: img.id,
                    raster: comp.raster,
                    pasted: comp.placements.len(),
                    placements: comp.placements,
                });
            }
            (out, gts, warns)
        })
        .collect();

    let mut dataset = ds.clone();
    let mut images = Vec::new();
    for (imgs, gts, warns) in results {
        dataset.images.extend(imgs.iter().map(|i| i.info.clone()));
        dataset.ground_truth.extend(gts);
        images.extend(imgs);
        warnings.extend(warns);
    }
    Ok(Augmented {
        dataset,
        images,
        warnings,
    })
}

/// Writes every augmented raster as PNG under `dir`.
pub fn write_rasters(images: &[AugmentedImage], dir: &Path) -> Result<(), AugmentError> {
    for img in images {
        let path = dir.join(&img.info.file_name);
        img.raster
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| AugmentError::Write { path, source })?;
    }
    Ok(())
}
