//! Three-channel float images and binary PPM (P6) IO.

use std::path::Path;

use crate::error::{Error, Result};

/// Per-channel normalization constants (ImageNet statistics).
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Channel-major `3 x h x w` image.
///
/// Raw images hold values in `[0, 1]`; model inputs are normalized with
/// [`ImageTensor::normalized`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![3, h, w],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self {
            h,
            w,
            data: vec![value; 3 * h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// `(v - mean) / std` per channel.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        let plane = self.h * self.w;
        for c in 0..3 {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = (*v - MEAN[c]) / STD[c];
            }
        }
        out
    }

    pub fn denormalized(&self) -> Self {
        let mut out = self.clone();
        let plane = self.h * self.w;
        for c in 0..3 {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = *v * STD[c] + MEAN[c];
            }
        }
        out
    }

    /// Pixel-major `[h * w, 3]` layout.
    pub fn to_hwc(&self) -> Vec<f32> {
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push(self.data[c * plane + p]);
            }
        }
        out
    }

    /// Encode a raw `[0, 1]` image as binary PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 {
            return Err(format!("only 8-bit PPM supported, maxval {max}"));
        }
        pos += 1;
        let body = &bytes[pos.min(bytes.len())..];
        if body.len() < 3 * w * h {
            return Err(format!("expected {} pixel bytes, found {}", 3 * w * h, body.len()));
        }
        Ok(Self::from_fn(h, w, |c, y, x| {
            body[(y * w + x) * 3 + c] as f32 / 255.0
        }))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// RGB in `[0, 1]` to HSV with hue in `[0, 1)`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// ITU-R 601 luma.
pub fn luma([r, g, b]: [f32; 3]) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}
