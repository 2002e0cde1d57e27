//! Dataset ingestion: label-space registries, the directory loader, and the
//! seeded toy fixture generator.
//!
//! Directory layout: `<root>/images/*.png|jpg` with matching
//! `<root>/labels/<stem>.png` single-channel class-index maps (255 = ignore).

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MlmpError, Result};
use crate::imgproc::{resize_label_nearest, resize_rgb_bilinear};

pub const IGNORE_INDEX: u8 = 255;

/// Ordered class names for one benchmark dataset.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    pub name: String,
    pub classes: Vec<String>,
    pub has_background: bool,
    pub ignore_index: u8,
}

impl LabelSpace {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

const REGISTRY: &[(&str, &str, bool)] = &[
    ("v20", include_str!("../data/classes/v20.txt"), false),
    ("v21", include_str!("../data/classes/v21.txt"), true),
    ("p59", include_str!("../data/classes/p59.txt"), false),
    ("p60", include_str!("../data/classes/p60.txt"), true),
    (
        "cityscapes",
        include_str!("../data/classes/cityscapes.txt"),
        false,
    ),
    (
        "coco_stuff",
        include_str!("../data/classes/coco_stuff.txt"),
        false,
    ),
    (
        "coco_object",
        include_str!("../data/classes/coco_object.txt"),
        true,
    ),
    ("toy", include_str!("../data/classes/toy.txt"), true),
];

/// Canonical label space for a dataset name.
pub fn registry(name: &str) -> Result<LabelSpace> {
    for (key, body, has_background) in REGISTRY {
        if *key == name {
            let classes: Vec<String> = body
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            return Ok(LabelSpace {
                name: name.to_string(),
                classes,
                has_background: *has_background,
                ignore_index: IGNORE_INDEX,
            });
        }
    }
    Err(MlmpError::UnknownName {
        name: name.to_string(),
        valid: REGISTRY
            .iter()
            .map(|(k, _, _)| *k)
            .collect::<Vec<_>>()
            .join(", "),
    })
}

pub fn dataset_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(k, _, _)| *k).collect()
}

/// One image with its class-index label map.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: RgbImage,
    pub label: GrayImage,
    pub id: String,
}

/// Lists `<root>/images` in lexicographic order, pairing each image with its
/// label by file stem.
pub fn list_pairs(root: &Path) -> Result<Vec<(PathBuf, PathBuf, String)>> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| MlmpError::io(images_dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    entries.sort();
    let mut pairs = Vec::with_capacity(entries.len());
    for img_path in entries {
        let stem = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MlmpError::Dataset {
                path: img_path.display().to_string(),
                message: "unreadable file stem".into(),
            })?
            .to_string();
        let label_path = labels_dir.join(format!("{stem}.png"));
        if !label_path.exists() {
            return Err(MlmpError::Dataset {
                path: img_path.display().to_string(),
                message: format!("missing label file {}", label_path.display()),
            });
        }
        pairs.push((img_path, label_path, stem));
    }
    Ok(pairs)
}

/// Loads every sample, optionally resizing to `resize_to` square (bilinear
/// for images, nearest for labels). Deterministic lexicographic order.
pub fn load(root: &Path, resize_to: Option<u32>) -> Result<Vec<SegSample>> {
    let pairs = list_pairs(root)?;
    let mut samples = Vec::with_capacity(pairs.len());
    for (img_path, label_path, id) in pairs {
        samples.push(load_sample(&img_path, &label_path, id, resize_to)?);
    }
    Ok(samples)
}

pub fn load_sample(
    img_path: &Path,
    label_path: &Path,
    id: String,
    resize_to: Option<u32>,
) -> Result<SegSample> {
    let image = image::open(img_path)
        .map_err(|e| MlmpError::Image {
            path: img_path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let label = image::open(label_path)
        .map_err(|e| MlmpError::Image {
            path: label_path.display().to_string(),
            message: e.to_string(),
        })?
        .to_luma8();
    if image.dimensions() != label.dimensions() {
        return Err(MlmpError::Dataset {
            path: img_path.display().to_string(),
            message: format!(
                "image {:?} and label {:?} dimensions differ",
                image.dimensions(),
                label.dimensions()
            ),
        });
    }
    let (image, label) = match resize_to {
        Some(side) if image.dimensions() != (side, side) => (
            resize_rgb_bilinear(&image, side, side),
            resize_label_nearest(&label, side, side),
        ),
        _ => (image, label),
    };
    Ok(SegSample { image, label, id })
}

/// Splits samples into consecutive batches; the last batch may be smaller.
pub fn batches(samples: &[SegSample], batch_size: usize) -> Vec<&[SegSample]> {
    if batch_size == 0 {
        return vec![];
    }
    samples.chunks(batch_size).collect()
}

/// Geometry of one generated toy sample, kept in the manifest so tests can
/// re-rasterize it independently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyShapeRecord {
    pub id: String,
    /// x0, y0, width, height of the filled class-1 rectangle.
    pub rect: (u32, u32, u32, u32),
    /// center x, center y, radius of the filled class-2 disc.
    pub circle: (u32, u32, u32),
    pub brightness: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyManifest {
    pub seed: u64,
    pub side: u32,
    pub count: usize,
    pub shapes: Vec<ToyShapeRecord>,
    pub checksum: String,
}

const TOY_SIDE: u32 = 64;
const TOY_COLORS: [[f32; 3]; 3] = [
    [0.15, 0.18, 0.42], // background
    [0.85, 0.18, 0.15], // square
    [0.15, 0.78, 0.25], // circle
];

/// Writes `n` seeded images of a red square and a green disc on a dark
/// background, with exact label maps and a one-pixel ignore border.
pub fn make_toy_dataset(dst: &Path, n_images: usize, seed: u64) -> Result<ToyManifest> {
    if n_images == 0 {
        return Err(MlmpError::invalid("toy dataset needs n >= 1"));
    }
    let images_dir = dst.join("images");
    let labels_dir = dst.join("labels");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| MlmpError::io(images_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&labels_dir)
        .map_err(|e| MlmpError::io(labels_dir.display().to_string(), e))?;

    let mut shapes = Vec::with_capacity(n_images);
    let mut digest = Sha256::new();
    for i in 0..n_images {
        let mut rng =
            ChaCha20Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let side = TOY_SIDE;
        let rect = {
            let w = rng.random_range(14..26);
            let h = rng.random_range(14..26);
            let x0 = rng.random_range(2..side - w - 2);
            let y0 = rng.random_range(2..side - h - 2);
            (x0, y0, w, h)
        };
        let circle = {
            let r = rng.random_range(7..14);
            let cx = rng.random_range(r + 2..side - r - 2);
            let cy = rng.random_range(r + 2..side - r - 2);
            (cx, cy, r)
        };
        let brightness: f32 = 0.9 + rng.random::<f32>() * 0.2;
        let record = ToyShapeRecord {
            id: format!("toy_{i:04}"),
            rect,
            circle,
            brightness,
        };
        let (image, label) = rasterize_toy(&record);
        let img_path = images_dir.join(format!("{}.png", record.id));
        let label_path = labels_dir.join(format!("{}.png", record.id));
        image.save(&img_path).map_err(|e| MlmpError::Image {
            path: img_path.display().to_string(),
            message: e.to_string(),
        })?;
        label.save(&label_path).map_err(|e| MlmpError::Image {
            path: label_path.display().to_string(),
            message: e.to_string(),
        })?;
        digest.update(image.as_raw());
        digest.update(label.as_raw());
        shapes.push(record);
    }
    let manifest = ToyManifest {
        seed,
        side: TOY_SIDE,
        count: n_images,
        shapes,
        checksum: crate::backbone::hex_prefix(&digest.finalize(), 16),
    };
    let manifest_path = dst.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest)
            .map_err(|e| MlmpError::Serialization(e.to_string()))?,
    )
    .map_err(|e| MlmpError::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

/// Pixel-exact rasterization shared by the generator and verifiable by
/// recomputing the same predicates.
pub fn rasterize_toy(rec: &ToyShapeRecord) -> (RgbImage, GrayImage) {
    let side = TOY_SIDE;
    let mut image = RgbImage::new(side, side);
    let mut label = GrayImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let class = toy_class_at(rec, x, y);
            let stored = if on_toy_border(x, y) {
                IGNORE_INDEX
            } else {
                class
            };
            label.put_pixel(x, y, image::Luma([stored]));
            let color = TOY_COLORS[class as usize];
            let px = [
                ((color[0] * rec.brightness).clamp(0.0, 1.0) * 255.0).round() as u8,
                ((color[1] * rec.brightness).clamp(0.0, 1.0) * 255.0).round() as u8,
                ((color[2] * rec.brightness).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            image.put_pixel(x, y, image::Rgb(px));
        }
    }
    (image, label)
}

/// Class membership predicate: the disc is drawn over the rectangle.
pub fn toy_class_at(rec: &ToyShapeRecord, x: u32, y: u32) -> u8 {
    let (cx, cy, cr) = rec.circle;
    let dx = x as i64 - cx as i64;
    let dy = y as i64 - cy as i64;
    if dx * dx + dy * dy <= (cr as i64) * (cr as i64) {
        return 2;
    }
    let (rx, ry, rw, rh) = rec.rect;
    if x >= rx && x < rx + rw && y >= ry && y < ry + rh {
        return 1;
    }
    0
}

pub fn on_toy_border(x: u32, y: u32) -> bool {
    x == 0 || y == 0 || x == TOY_SIDE - 1 || y == TOY_SIDE - 1
}
