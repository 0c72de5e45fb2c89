//! Unsupervised object proposals: selective search over a graph-based
//! segmentation, ground-truth boxes, or random boxes, with a JSON cache.

mod grouping;
mod segment;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use grouping::{adjacency, extract_regions, hierarchical_group, similarity, Hierarchy, Region, Run};
pub use segment::{felzenszwalb_segment, LabelMap, SegmentParams};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;
use crate::seeds;
use crate::synth::sidecar;

pub const DEFAULT_TOP_K: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    pub rank: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    #[default]
    #[serde(alias = "ss")]
    SelectiveSearch,
    #[serde(alias = "gt")]
    GroundTruth,
    Random,
}

impl ProposalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalMode::SelectiveSearch => "selective_search",
            ProposalMode::GroundTruth => "ground_truth",
            ProposalMode::Random => "random",
        }
    }
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ss" | "selective_search" => Ok(ProposalMode::SelectiveSearch),
            "gt" | "ground_truth" => Ok(ProposalMode::GroundTruth),
            "random" | "rnd" => Ok(ProposalMode::Random),
            other => Err(Error::invalid(format!("unknown proposal mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub mode: ProposalMode,
    pub top_k: usize,
    pub sigma: f64,
    pub k: f64,
    pub min_size: usize,
    /// Area range of random boxes as a fraction of the image.
    pub random_area: [f64; 2],
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            mode: ProposalMode::SelectiveSearch,
            top_k: DEFAULT_TOP_K,
            sigma: 0.8,
            k: 200.0,
            min_size: 50,
            random_area: [0.02, 0.5],
        }
    }
}

impl ProposalConfig {
    pub fn segment_params(&self) -> SegmentParams {
        SegmentParams {
            sigma: self.sigma,
            k: self.k,
            min_size: self.min_size,
        }
    }
}

/// At most `k` proposals by descending rank; ties keep input order.
pub fn top_k(mut proposals: Vec<RegionProposal>, k: usize) -> Vec<RegionProposal> {
    proposals.sort_by(|a, b| b.rank.total_cmp(&a.rank));
    proposals.truncate(k);
    proposals
}

/// Segmentation, grouping, and ranking, before truncation.
pub fn selective_search_hierarchy(img: &ImageTensor, cfg: &ProposalConfig, seed: u64) -> Hierarchy {
    let labels = felzenszwalb_segment(img, cfg.segment_params());
    let regions = extract_regions(img, &labels);
    hierarchical_group(regions, &adjacency(&labels), img.height(), img.width(), seed)
}

pub fn selective_search(img: &ImageTensor, cfg: &ProposalConfig, seed: u64) -> Vec<RegionProposal> {
    top_k(selective_search_hierarchy(img, cfg, seed).proposals, cfg.top_k)
}

/// `k` boxes with area uniform in `area` and aspect ratio log-uniform in
/// `[1/2, 2]`, fully inside the image.
pub fn random_boxes(k: usize, area: [f64; 2], seed: u64) -> Vec<RegionProposal> {
    let mut rng = seeds::rng(seed);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let a = rng.gen_range(area[0]..=area[1]);
        let ratio = rng.gen_range(-std::f64::consts::LN_2..=std::f64::consts::LN_2).exp();
        let (w, h) = ((a * ratio).sqrt(), (a / ratio).sqrt());
        if w > 1.0 || h > 1.0 {
            continue;
        }
        let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
        out.push(RegionProposal {
            bbox: BoundingBox::new(cx, cy, w, h),
            rank: (k - out.len()) as f64,
        });
    }
    out
}

/// Proposals for one image under the configured mode.
pub fn proposal_source(
    img: &ImageTensor,
    annotations: Option<&[BoundingBox]>,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Vec<RegionProposal>> {
    match cfg.mode {
        ProposalMode::SelectiveSearch => Ok(selective_search(img, cfg, seed)),
        ProposalMode::GroundTruth => {
            let boxes = annotations.ok_or_else(|| Error::invalid("ground_truth proposals need annotations"))?;
            Ok(boxes
                .iter()
                .enumerate()
                .map(|(i, b)| RegionProposal {
                    bbox: *b,
                    rank: (boxes.len() - i) as f64,
                })
                .take(cfg.top_k)
                .collect())
        }
        ProposalMode::Random => Ok(random_boxes(cfg.top_k, cfg.random_area, seed)),
    }
}

/// Cached proposals stored next to an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSidecar {
    pub image_sha256: String,
    pub mode: String,
    pub proposals: Vec<BoundingBox>,
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    sidecar(image, "props.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_sidecar(path: &Path, sidecar: &ProposalSidecar) -> Result<()> {
    let json = serde_json::to_string(sidecar).map_err(|e| Error::json(path, e))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<ProposalSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Load cached proposals for `image` if the sidecar matches its hash and
/// mode, otherwise compute and persist them.
pub fn cached_proposals(
    image: &Path,
    annotations: Option<&[BoundingBox]>,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Vec<BoundingBox>> {
    let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
    let hash = sha256_hex(&bytes);
    let path = sidecar_path(image);
    if let Ok(cached) = read_sidecar(&path) {
        if cached.image_sha256 == hash && cached.mode == cfg.mode.as_str() && cached.proposals.len() <= cfg.top_k {
            return Ok(cached.proposals);
        }
    }
    let img = ImageTensor::from_ppm(&bytes).map_err(|reason| Error::Image {
        path: image.to_path_buf(),
        reason,
    })?;
    let proposals: Vec<BoundingBox> = proposal_source(&img, annotations, cfg, seed)?
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    write_sidecar(
        &path,
        &ProposalSidecar {
            image_sha256: hash,
            mode: cfg.mode.as_str().to_string(),
            proposals: proposals.clone(),
        },
    )?;
    Ok(proposals)
}
