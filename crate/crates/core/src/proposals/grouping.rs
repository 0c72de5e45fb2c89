//! Region descriptors and hierarchical grouping of adjacent regions.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::segment::LabelMap;
use super::RegionProposal;
use crate::augment::gaussian_blur;
use crate::geometry::BoundingBox;
use crate::image::{luma, rgb_to_hsv, ImageTensor};
use crate::seeds;

pub const COLOR_BINS: usize = 25;
pub const ORIENTATIONS: usize = 8;
pub const TEXTURE_BINS: usize = 10;
/// Gradient response that saturates the top texture bin.
const TEXTURE_RANGE: f32 = 0.25;

/// A horizontal pixel run `[x0, x1)` on row `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub y: u32,
    pub x0: u32,
    pub x1: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub runs: Vec<Run>,
    /// Pixel bounds `[x0, y0, x1, y1)`.
    pub bounds: [usize; 4],
    pub color: Vec<f32>,
    pub texture: Vec<f32>,
    pub size: usize,
}

impl Region {
    pub fn bbox(&self, h: usize, w: usize) -> BoundingBox {
        let [x0, y0, x1, y1] = self.bounds;
        BoundingBox::from_corners(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        )
    }

    fn merge(&self, other: &Region) -> Region {
        let (sa, sb) = (self.size as f32, other.size as f32);
        let blend = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x * sa + y * sb) / (sa + sb)).collect();
        let mut runs = self.runs.clone();
        runs.extend_from_slice(&other.runs);
        Region {
            runs,
            bounds: union_bounds(self.bounds, other.bounds),
            color: blend(&self.color, &other.color),
            texture: blend(&self.texture, &other.texture),
            size: self.size + other.size,
        }
    }
}

fn union_bounds(a: [usize; 4], b: [usize; 4]) -> [usize; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

fn normalize(hist: &mut [f32]) {
    let total: f32 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
}

fn intersection(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y) as f64).sum()
}

/// Color + texture + size + fill similarity, each weighted 1.
pub fn similarity(a: &Region, b: &Region, image_size: usize) -> f64 {
    let n = image_size as f64;
    let combined = (a.size + b.size) as f64;
    let [x0, y0, x1, y1] = union_bounds(a.bounds, b.bounds);
    let bbox_area = ((x1 - x0) * (y1 - y0)) as f64;
    intersection(&a.color, &b.color)
        + intersection(&a.texture, &b.texture)
        + (1.0 - combined / n)
        + (1.0 - (bbox_area - combined) / n)
}

/// Build one [`Region`] per label.
pub fn extract_regions(img: &ImageTensor, labels: &LabelMap) -> Vec<Region> {
    let (h, w) = (labels.h, labels.w);
    let n = labels.count;
    let mut regions: Vec<Region> = (0..n)
        .map(|_| Region {
            runs: Vec::new(),
            bounds: [usize::MAX, usize::MAX, 0, 0],
            color: vec![0.0; 3 * COLOR_BINS],
            texture: vec![0.0; ORIENTATIONS * TEXTURE_BINS],
            size: 0,
        })
        .collect();

    let smooth = gaussian_blur(img, 1.0);
    let lum = |y: usize, x: usize| luma(smooth.pixel(y, x));
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let l = labels.get(y, x);
            let start = x;
            while x < w && labels.get(y, x) == l {
                x += 1;
            }
            let r = &mut regions[l as usize];
            r.runs.push(Run {
                y: y as u32,
                x0: start as u32,
                x1: x as u32,
            });
            r.bounds = union_bounds(r.bounds, [start, y, x, y + 1]);
        }
        for x in 0..w {
            let r = &mut regions[labels.get(y, x) as usize];
            r.size += 1;
            let hsv = rgb_to_hsv(img.pixel(y, x));
            for (c, v) in hsv.iter().enumerate() {
                let bin = ((v * COLOR_BINS as f32) as usize).min(COLOR_BINS - 1);
                r.color[c * COLOR_BINS + bin] += 1.0;
            }
            let gx = (lum(y, (x + 1).min(w - 1)) - lum(y, x.saturating_sub(1))) / 2.0;
            let gy = (lum((y + 1).min(h - 1), x) - lum(y.saturating_sub(1), x)) / 2.0;
            for o in 0..ORIENTATIONS {
                let theta = o as f32 * std::f32::consts::TAU / ORIENTATIONS as f32;
                let resp = (gx * theta.cos() + gy * theta.sin()).max(0.0);
                let bin = ((resp / TEXTURE_RANGE * TEXTURE_BINS as f32) as usize).min(TEXTURE_BINS - 1);
                r.texture[o * TEXTURE_BINS + bin] += 1.0;
            }
        }
    }
    for r in &mut regions {
        normalize(&mut r.color);
        normalize(&mut r.texture);
    }
    regions
}

/// Unordered pairs of 4-adjacent labels.
pub fn adjacency(labels: &LabelMap) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    let mut add = |a: u32, b: u32| {
        if a != b {
            out.insert((a.min(b) as usize, a.max(b) as usize));
        }
    };
    for y in 0..labels.h {
        for x in 0..labels.w {
            if x + 1 < labels.w {
                add(labels.get(y, x), labels.get(y, x + 1));
            }
            if y + 1 < labels.h {
                add(labels.get(y, x), labels.get(y + 1, x));
            }
        }
    }
    out
}

/// Every region of the hierarchy, with its merge count.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    /// Deduplicated proposals in discovery order.
    pub proposals: Vec<RegionProposal>,
    pub merges: usize,
    pub initial_regions: usize,
}

/// Greedily merge the most similar adjacent pair until one region remains.
///
/// Initial regions have level 1 and a merge sits one level above its higher
/// child. The rank is `1 / (level * u)` with `u` uniform in `(0, 1]`, so a
/// descending sort favors low levels with random diversification.
pub fn hierarchical_group(
    regions: Vec<Region>,
    neighbours: &BTreeSet<(usize, usize)>,
    h: usize,
    w: usize,
    seed: u64,
) -> Hierarchy {
    let initial = regions.len();
    let image_size = h * w;
    let mut all: Vec<(Region, u32)> = regions.into_iter().map(|r| (r, 1)).collect();
    let mut alive: BTreeSet<usize> = (0..initial).collect();
    let mut sims: BTreeMap<(usize, usize), f64> = neighbours
        .iter()
        .map(|&(a, b)| ((a, b), similarity(&all[a].0, &all[b].0, image_size)))
        .collect();
    let mut merges = 0;
    while alive.len() > 1 {
        let mut best: Option<((usize, usize), f64)> = None;
        for (&pair, &s) in &sims {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((pair, s));
            }
        }
        // Disconnected leftovers merge in index order.
        let (a, b) = match best {
            Some((pair, _)) => pair,
            None => {
                let mut it = alive.iter();
                (*it.next().unwrap(), *it.next().unwrap())
            }
        };
        let merged = all[a].0.merge(&all[b].0);
        let level = all[a].1.max(all[b].1) + 1;
        let id = all.len();
        all.push((merged, level));
        alive.remove(&a);
        alive.remove(&b);
        let mut touching = BTreeSet::new();
        sims.retain(|&(p, q), _| {
            let hit = p == a || p == b || q == a || q == b;
            if hit {
                touching.insert(if p == a || p == b { q } else { p });
            }
            !hit
        });
        touching.remove(&a);
        touching.remove(&b);
        for t in touching {
            sims.insert((t, id), similarity(&all[t].0, &all[id].0, image_size));
        }
        alive.insert(id);
        merges += 1;
    }

    let mut rng = seeds::rng(seed);
    let mut proposals: Vec<RegionProposal> = Vec::new();
    let mut seen: BTreeMap<[usize; 4], usize> = BTreeMap::new();
    for (region, level) in &all {
        let u = 1.0 - rng.gen::<f64>();
        let rank = 1.0 / (*level as f64 * u);
        let candidate = RegionProposal {
            bbox: region.bbox(h, w),
            rank,
        };
        match seen.get(&region.bounds) {
            Some(&i) => {
                if rank > proposals[i].rank {
                    proposals[i].rank = rank;
                }
            }
            None => {
                seen.insert(region.bounds, proposals.len());
                proposals.push(candidate);
            }
        }
    }
    Hierarchy {
        proposals,
        merges,
        initial_regions: initial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::segment::{felzenszwalb_segment, SegmentParams};

    fn stripes() -> ImageTensor {
        ImageTensor::from_fn(32, 48, |c, _, x| match x / 16 {
            0 => [0.9, 0.1, 0.1][c],
            1 => [0.1, 0.9, 0.1][c],
            _ => [0.9, 0.1, 0.1][c],
        })
    }

    #[test]
    fn regions_are_normalized_and_tight() {
        let img = stripes();
        let labels = felzenszwalb_segment(&img, SegmentParams::default());
        let regions = extract_regions(&img, &labels);
        assert_eq!(regions.len(), 3);
        for r in &regions {
            assert!((r.color.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!((r.texture.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            let covered: usize = r.runs.iter().map(|run| (run.x1 - run.x0) as usize).sum();
            assert_eq!(covered, r.size);
            let xs = r.runs.iter().map(|run| run.x0 as usize).min().unwrap();
            let xe = r.runs.iter().map(|run| run.x1 as usize).max().unwrap();
            let ys = r.runs.iter().map(|run| run.y as usize).min().unwrap();
            let ye = r.runs.iter().map(|run| run.y as usize).max().unwrap() + 1;
            assert_eq!(r.bounds, [xs, ys, xe, ye]);
        }
    }

    #[test]
    fn merge_count_is_regions_minus_one() {
        let img = stripes();
        let labels = felzenszwalb_segment(&img, SegmentParams::default());
        let regions = extract_regions(&img, &labels);
        let hier = hierarchical_group(regions, &adjacency(&labels), 32, 48, 1);
        assert_eq!(hier.merges, 2);
        assert!(hier.proposals.len() <= 5);
        let single = felzenszwalb_segment(&ImageTensor::filled(16, 16, 0.5), SegmentParams::default());
        let hier = hierarchical_group(extract_regions(&ImageTensor::filled(16, 16, 0.5), &single), &adjacency(&single), 16, 16, 1);
        assert_eq!(hier.merges, 0);
        assert_eq!(hier.proposals.len(), 1);
        assert_eq!(hier.proposals[0].bbox, BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn identical_neighbour_is_most_similar() {
        let base = Region {
            runs: vec![],
            bounds: [0, 0, 8, 8],
            color: vec![1.0 / 75.0; 75],
            texture: vec![1.0 / 80.0; 80],
            size: 64,
        };
        let twin = Region {
            bounds: [8, 0, 16, 8],
            ..base.clone()
        };
        let mut other = twin.clone();
        other.color = (0..75).map(|i| if i % 25 == 0 { 1.0 / 3.0 } else { 0.0 }).collect();
        let mut distant_texture = twin.clone();
        distant_texture.texture = (0..80).map(|i| if i % 10 == 9 { 1.0 / 8.0 } else { 0.0 }).collect();
        let s = |r: &Region| similarity(&base, r, 256);
        let expected = 1.0 + 1.0 + (1.0 - 128.0 / 256.0) + 1.0;
        assert!((s(&twin) - expected).abs() < 1e-6);
        assert!(s(&twin) > s(&other));
        assert!(s(&twin) > s(&distant_texture));
    }
}
