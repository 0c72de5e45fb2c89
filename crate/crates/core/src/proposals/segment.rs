//! Graph-based image segmentation over an 8-connected pixel grid.

use crate::augment::gaussian_blur;
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentParams {
    pub sigma: f64,
    /// Threshold scale on the 0..255 intensity range.
    pub k: f64,
    pub min_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 200.0,
            min_size: 50,
        }
    }
}

/// Dense per-pixel labels `0..count`, numbered in raster order of first
/// appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl LabelMap {
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) -> usize {
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        self.size[hi] += self.size[lo];
        self.internal[hi] = weight.max(self.internal[hi]).max(self.internal[lo]);
        hi
    }
}

pub fn felzenszwalb_segment(img: &ImageTensor, params: SegmentParams) -> LabelMap {
    let (h, w) = (img.height(), img.width());
    let smooth = if params.sigma > 0.0 { gaussian_blur(img, params.sigma) } else { img.clone() };
    let px = |y: usize, x: usize| smooth.pixel(y, x).map(|v| v as f64 * 255.0);
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            let a = px(y, x);
            let mut push = |yy: usize, xx: usize| {
                let b = px(yy, xx);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                edges.push((d, y * w + x, yy * w + xx));
            };
            if x + 1 < w {
                push(y, x + 1);
            }
            if y + 1 < h {
                push(y + 1, x);
                if x + 1 < w {
                    push(y + 1, x + 1);
                }
                if x > 0 {
                    push(y + 1, x - 1);
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut set = DisjointSet::new(h * w);
    let mut threshold = vec![params.k; h * w];
    for &(wt, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && wt <= threshold[ra] && wt <= threshold[rb] {
            let r = set.union(ra, rb, wt);
            threshold[r] = wt + params.k / set.size[r] as f64;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && (set.size[ra] < params.min_size || set.size[rb] < params.min_size) {
            set.union(ra, rb, 0.0);
        }
    }

    let mut remap = vec![u32::MAX; h * w];
    let mut labels = Vec::with_capacity(h * w);
    let mut count = 0u32;
    for p in 0..h * w {
        let r = set.find(p);
        if remap[r] == u32::MAX {
            remap[r] = count;
            count += 1;
        }
        labels.push(remap[r]);
    }
    LabelMap {
        h,
        w,
        labels,
        count: count as usize,
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::seeds;

    #[test]
    fn uniform_image_is_one_region() {
        let seg = felzenszwalb_segment(&ImageTensor::filled(32, 40, 0.4), SegmentParams::default());
        assert_eq!(seg.count, 1);
    }

    #[test]
    fn contrasting_halves_are_two_regions() {
        let img = ImageTensor::from_fn(32, 32, |_, _, x| if x < 16 { 0.1 } else { 0.9 });
        let seg = felzenszwalb_segment(&img, SegmentParams::default());
        assert_eq!(seg.count, 2);
        assert_ne!(seg.get(0, 0), seg.get(0, 31));
        assert_eq!(seg.get(0, 0), seg.get(31, 15));
    }

    #[test]
    fn random_images_respect_min_size() {
        for seed in 0..10 {
            let mut rng = seeds::rng(seed);
            let img = ImageTensor::new(48, 48, (0..3 * 48 * 48).map(|_| rng.gen()).collect()).unwrap();
            let seg = felzenszwalb_segment(&img, SegmentParams::default());
            assert!(seg.sizes().iter().all(|s| *s >= 50), "seed {seed}: {:?}", seg.sizes());
            assert_eq!(seg.labels.len(), 48 * 48);
            assert_eq!(seg, felzenszwalb_segment(&img, SegmentParams::default()));
        }
    }
}
