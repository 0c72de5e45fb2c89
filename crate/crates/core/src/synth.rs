//! Synthetic multi-object scenes: flat-ish textured backgrounds with one to
//! three solid rectangles or ellipses.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::image::ImageTensor;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageTensor,
    pub gt_boxes: Vec<BoundingBox>,
    pub styles: Vec<ObjectStyle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels.
    pub side: [usize; 2],
    pub max_pair_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 1,
            max_objects: 3,
            side: [12, 30],
            max_pair_iou: 0.3,
        }
    }
}

/// Ground-truth sidecar contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<BoundingBox>,
}

fn distinct_color(rng: &mut impl Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    let mut best = [0.0; 3];
    let mut best_d = -1.0;
    for _ in 0..16 {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let d = avoid
            .iter()
            .map(|a| (0..3).map(|k| (a[k] - c[k]).abs()).sum::<f32>())
            .fold(f32::INFINITY, f32::min);
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn pixel_box((x0, y0, x1, y1): (usize, usize, usize, usize), s: usize) -> BoundingBox {
    let s = s as f64;
    BoundingBox::from_corners(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s)
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> SyntheticScene {
    let mut rng = seeds::rng(seed);
    let s = cfg.size;
    let wanted = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let bg = distinct_color(&mut rng, &[]);
    let mut colors = vec![bg];
    let mut boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut styles = Vec::new();
    let mut attempts = 0;
    while boxes.len() < wanted && attempts < 500 {
        attempts += 1;
        let bw = rng.gen_range(cfg.side[0]..=cfg.side[1].min(s));
        let bh = rng.gen_range(cfg.side[0]..=cfg.side[1].min(s));
        let x0 = rng.gen_range(0..=s - bw);
        let y0 = rng.gen_range(0..=s - bh);
        let cand = (x0, y0, x0 + bw, y0 + bh);
        if boxes.iter().any(|b| iou(pixel_box(*b, s), pixel_box(cand, s)) > cfg.max_pair_iou) {
            continue;
        }
        let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
        let color = distinct_color(&mut rng, &colors);
        colors.push(color);
        boxes.push(cand);
        styles.push(ObjectStyle { shape, color });
    }
    let noise: Vec<f32> = (0..3 * s * s).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let mut image = ImageTensor::from_fn(s, s, |c, y, x| bg[c] + noise[(c * s + y) * s + x]);
    for (&(x0, y0, x1, y1), style) in boxes.iter().zip(&styles) {
        let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
        let (rx, ry) = ((x1 - x0) as f64 / 2.0, (y1 - y0) as f64 / 2.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = match style.shape {
                    Shape::Rect => true,
                    Shape::Ellipse => {
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        dx * dx + dy * dy <= 1.0
                    }
                };
                if inside {
                    for c in 0..3 {
                        let v = style.color[c] + noise[(c * s + y) * s + x];
                        image.set(c, y, x, v);
                    }
                }
            }
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let gt_boxes = boxes.iter().map(|b| pixel_box(*b, s)).collect();
    SyntheticScene {
        image,
        gt_boxes,
        styles,
    }
}

/// `<stem>.gt.json` next to an image.
pub fn annotation_path(image: &Path) -> PathBuf {
    sidecar(image, "gt.json")
}

pub(crate) fn sidecar(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.{suffix}"))
}

pub fn read_annotation(image: &Path) -> Result<Annotation> {
    let path = annotation_path(image);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Write `count` scenes as `scene_NNNNN.ppm` plus ground-truth sidecars.
pub fn generate_synthetic(count: usize, seed: u64, out_dir: &Path, cfg: &SceneConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(cfg, seeds::mix(seed, i as u64));
        let path = out_dir.join(format!("scene_{i:05}.ppm"));
        scene.image.write_ppm(&path)?;
        let gt = annotation_path(&path);
        let json = serde_json::to_string(&Annotation { boxes: scene.gt_boxes }).map_err(|e| Error::json(&gt, e))?;
        std::fs::write(&gt, json).map_err(|e| Error::io(&gt, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Sorted `*.ppm` files in a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
