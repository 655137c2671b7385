#![allow(dead_code)]

use std::path::Path;

use detfuse::formats::{write_coco_annotations, Dataset, ImageInfo};
use detfuse::{BBox, CategoryTable, GroundTruthBox, ScoredDetection};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(0.0..extent / 2.0);
    let h = rng.random_range(0.0..extent / 2.0);
    BBox::from_xywh(x, y, w, h).unwrap()
}

pub fn det(b: [f64; 4], score: f64, category: u32, model: u32, image: u64) -> ScoredDetection {
    ScoredDetection::new(
        BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        score,
        category,
        model,
        image,
    )
    .unwrap()
}

/// Three 160x120 scenes with a textured background and a few labelled
/// objects each. The second object of every image carries a polygon.
pub fn toy_dataset() -> (Dataset, Vec<RgbImage>) {
    let mut ds = Dataset {
        categories: CategoryTable::new(vec![(1, "car".into()), (2, "person".into())]).unwrap(),
        ..Dataset::default()
    };
    let mut rasters = Vec::new();
    for i in 0..3u64 {
        let id = i + 1;
        let mut img = RgbImage::from_fn(160, 120, |x, y| {
            Rgb([(x * 3 + y + 40 * i as u32) as u8, (y * 2 + x / 2) as u8, (x ^ y) as u8])
        });
        let boxes = [
            (10.0 + 5.0 * i as f64, 10.0, 30.0, 20.0, 1),
            (70.0, 40.0, 24.0, 30.0, 2),
            (120.0, 80.0, 20.0, 18.0, 1),
        ];
        for (k, &(x, y, w, h, cat)) in boxes.iter().enumerate() {
            for py in y as u32..(y + h) as u32 {
                for px in x as u32..(x + w) as u32 {
                    img.put_pixel(px, py, Rgb([200 + k as u8 * 20, 30 * cat as u8, 60 + 10 * i as u8]));
                }
            }
            let mut gt = GroundTruthBox::new(BBox::from_xywh(x, y, w, h).unwrap(), cat, id);
            if k == 1 {
                gt.segmentation = Some(vec![vec![x, y, x + w, y, x + w / 2.0, y + h]]);
            }
            ds.ground_truth.push(gt);
        }
        ds.images.push(ImageInfo {
            id,
            width: 160,
            height: 120,
            file_name: format!("scene{id}.png"),
        });
        rasters.push(img);
    }
    (ds, rasters)
}

/// Writes the toy dataset as `annotations.json` plus `images/`.
pub fn write_toy_dataset(dir: &Path) {
    let (ds, rasters) = toy_dataset();
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for (info, r) in ds.images.iter().zip(&rasters) {
        r.save(dir.join("images").join(&info.file_name)).unwrap();
    }
    std::fs::write(dir.join("annotations.json"), write_coco_annotations(&ds)).unwrap();
}
