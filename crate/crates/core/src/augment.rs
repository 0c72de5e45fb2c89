//! Weak/strong view construction with shared geometry.
//!
//! Both views are cut from one base view: the momentum view adds only its
//! mask, the online view adds photometric distortion and the complementary
//! mask. Geometry is a single record, so boxes land at the same normalized
//! coordinates in both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::{hsv_to_rgb, luma, rgb_to_hsv, ImageTensor};
use crate::masking::{apply_mask, mask_pair, MaskConfig, MaskPair};
use crate::seeds;

/// Crop window in (possibly flipped) normalized source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// Flip, then crop, then resize to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub flip: bool,
    /// Resize factor applied to the source before cropping.
    pub scale: f64,
    pub crop: CropRect,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            flip: false,
            scale: 1.0,
            crop: CropRect::FULL,
            out_h: h,
            out_w: w,
        }
    }

    /// Source normalized point -> view normalized point (unclamped).
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { 1.0 - x } else { x };
        (
            (x - self.crop.x0) / self.crop.width(),
            (y - self.crop.y0) / self.crop.height(),
        )
    }

    /// View normalized point -> source normalized point.
    pub fn unmap_point(&self, u: f64, v: f64) -> (f64, f64) {
        let x = self.crop.x0 + u * self.crop.width();
        let y = self.crop.y0 + v * self.crop.height();
        (if self.flip { 1.0 - x } else { x }, y)
    }

    /// Map a source box; `None` when less than `min_visible` of its area
    /// survives the crop.
    pub fn map_box(&self, b: BoundingBox, min_visible: f64) -> Option<BoundingBox> {
        let [x0, y0, x1, y1] = b.corners();
        let (ax, ay) = self.map_point(x0, y0);
        let (bx, by) = self.map_point(x1, y1);
        let (lx, hx) = (ax.min(bx), ax.max(bx));
        let (ly, hy) = (ay.min(by), ay.max(by));
        let full = (hx - lx) * (hy - ly);
        let (cx0, cx1) = (lx.clamp(0.0, 1.0), hx.clamp(0.0, 1.0));
        let (cy0, cy1) = (ly.clamp(0.0, 1.0), hy.clamp(0.0, 1.0));
        let visible = (cx1 - cx0) * (cy1 - cy0);
        if full <= 0.0 || visible <= 0.0 || visible < min_visible * full {
            return None;
        }
        Some(BoundingBox::from_corners(cx0, cy0, cx1, cy1))
    }

    /// Resample `src` through this geometry with bilinear interpolation.
    pub fn warp(&self, src: &ImageTensor) -> ImageTensor {
        let (h, w) = (src.height(), src.width());
        let coord = |n: f64, len: usize| {
            let p = n * len as f64 - 0.5;
            let r = p.round();
            if (p - r).abs() < 1e-9 {
                r
            } else {
                p
            }
        };
        let taps = |p: f64, len: usize| {
            let p = p.clamp(0.0, (len - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (p - i0 as f64) as f32)
        };
        let mut out = ImageTensor::filled(self.out_h, self.out_w, 0.0);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let u = (ox as f64 + 0.5) / self.out_w as f64;
                let v = (oy as f64 + 0.5) / self.out_h as f64;
                let (sx, sy) = self.unmap_point(u, v);
                let (x0, x1, fx) = taps(coord(sx, w), w);
                let (y0, y1, fy) = taps(coord(sy, h), h);
                for c in 0..3 {
                    let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
                    let bot = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
                    out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    pub enabled: bool,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub output_size: usize,
    pub flip_prob: f64,
    /// Range of the resized shorter side, in pixels.
    pub resize_range: [usize; 2],
    pub min_visible: f64,
    pub photometric: PhotometricConfig,
    pub mask: MaskConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 64,
            flip_prob: 0.5,
            resize_range: [48, 96],
            min_visible: 0.1,
            photometric: PhotometricConfig::default(),
            mask: MaskConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// No flips, no resize, no photometrics, no masks.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            flip_prob: 0.0,
            resize_range: [output_size, output_size],
            photometric: PhotometricConfig {
                enabled: false,
                ..PhotometricConfig::default()
            },
            mask: MaskConfig::disabled(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 || self.resize_range[0] == 0 || self.resize_range[0] > self.resize_range[1] {
            return Err(Error::invalid(format!(
                "bad augment sizes: output {} resize {:?}",
                self.output_size, self.resize_range
            )));
        }
        self.mask.validate()
    }
}

/// Sample the shared geometry for an `h x w` source.
pub fn sample_geometry(h: usize, w: usize, cfg: &AugmentConfig, seed: u64) -> Geometry {
    let mut rng = seeds::rng(seed);
    let out = cfg.output_size;
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    for _ in 0..10 {
        let side = rng.gen_range(cfg.resize_range[0]..=cfg.resize_range[1]);
        let scale = side as f64 / h.min(w) as f64;
        let fw = (out as f64 / (scale * w as f64)).min(1.0);
        let fh = (out as f64 / (scale * h as f64)).min(1.0);
        if !(fw > 0.0 && fh > 0.0) {
            continue;
        }
        let x0 = rng.gen_range(0.0..=1.0 - fw);
        let y0 = rng.gen_range(0.0..=1.0 - fh);
        return Geometry {
            flip,
            scale,
            crop: CropRect {
                x0,
                y0,
                x1: x0 + fw,
                y1: y0 + fh,
            },
            out_h: out,
            out_w: out,
        };
    }
    Geometry {
        flip,
        ..Geometry::identity(out, out)
    }
}

/// Random flip, resize, and crop of a raw image.
pub fn build_base_view(src: &ImageTensor, cfg: &AugmentConfig, seed: u64) -> (ImageTensor, Geometry) {
    let g = sample_geometry(src.height(), src.width(), cfg, seed);
    (g.warp(src), g)
}

pub fn map_boxes(boxes: &[BoundingBox], g: &Geometry, min_visible: f64) -> Vec<BoundingBox> {
    boxes.iter().filter_map(|b| g.map_box(*b, min_visible)).collect()
}

/// Color jitter, grayscale, and blur on a raw `[0, 1]` image.
pub fn photometric(img: &ImageTensor, cfg: &PhotometricConfig, seed: u64) -> ImageTensor {
    if !cfg.enabled {
        return img.clone();
    }
    let mut rng = seeds::rng(seed);
    let mut out = img.clone();
    let factor = |rng: &mut rand_chacha::ChaCha8Rng, amount: f64| {
        rng.gen_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32
    };
    if rng.gen_bool(cfg.jitter_prob) {
        let b = factor(&mut rng, cfg.brightness);
        let c = factor(&mut rng, cfg.contrast);
        let s = factor(&mut rng, cfg.saturation);
        let hue = rng.gen_range(-cfg.hue..=cfg.hue) as f32;
        for v in out.data_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
        let n = (out.height() * out.width()) as f32;
        let mut mean = 0.0;
        for y in 0..out.height() {
            for x in 0..out.width() {
                mean += luma(out.pixel(y, x));
            }
        }
        mean /= n;
        for v in out.data_mut() {
            *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
        }
        for y in 0..out.height() {
            for x in 0..out.width() {
                let p = out.pixel(y, x);
                let g = luma(p);
                let mut q = p.map(|v| (g + (v - g) * s).clamp(0.0, 1.0));
                if hue != 0.0 {
                    let [h, sat, val] = rgb_to_hsv(q);
                    q = hsv_to_rgb([h + hue, sat, val]);
                }
                for c in 0..3 {
                    out.set(c, y, x, q[c]);
                }
            }
        }
    }
    if rng.gen_bool(cfg.grayscale_prob) {
        for y in 0..out.height() {
            for x in 0..out.width() {
                let g = luma(out.pixel(y, x));
                for c in 0..3 {
                    out.set(c, y, x, g);
                }
            }
        }
    }
    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &ImageTensor, horizontal: bool| {
        let mut dst = src.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let d = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += wgt * src.get(c, sy as usize, sx as usize);
                    }
                    dst.set(c, y as usize, x as usize, acc);
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// The two branch inputs built from one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    /// Normalized base view before photometrics and masks.
    pub base: ImageTensor,
    /// Weak view for the momentum branch.
    pub view1: ImageTensor,
    /// Strong view for the online branch.
    pub view2: ImageTensor,
    pub geometry: Geometry,
    pub masks: MaskPair,
}

pub fn make_views(src: &ImageTensor, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    cfg.validate()?;
    let (raw, geometry) = build_base_view(src, cfg, seeds::mix(seed, 0));
    let base = raw.normalized();
    let strong = photometric(&raw, &cfg.photometric, seeds::mix(seed, 1)).normalized();
    let masks = mask_pair(&cfg.mask, geometry.out_h, geometry.out_w, seeds::mix(seed, 2))?;
    let view1 = match &masks.momentum {
        Some(m) => apply_mask(&base, m, cfg.mask.fill)?,
        None => base.clone(),
    };
    let view2 = match &masks.online {
        Some(m) => apply_mask(&strong, m, cfg.mask.fill)?,
        None => strong,
    };
    Ok(ViewPair {
        base,
        view1,
        view2,
        geometry,
        masks,
    })
}
