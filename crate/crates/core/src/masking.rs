//! Patch-grid image masks: random masks, exact complements, and the mask
//! strategies available to the two branches.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Grid of `patch x patch` cells over an image; `true` means masked.
///
/// Edge cells that overhang the image still count as whole cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    patch: usize,
    image_h: usize,
    image_w: usize,
    grid_h: usize,
    grid_w: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || patch > h.min(w) {
            return Err(Error::invalid(format!(
                "patch size {patch} must be in 1..={}",
                h.min(w)
            )));
        }
        let (grid_h, grid_w) = (h.div_ceil(patch), w.div_ceil(patch));
        Ok(Self {
            patch,
            image_h: h,
            image_w: w,
            grid_h,
            grid_w,
            cells: vec![false; grid_h * grid_w],
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.num_cells() as f64
    }

    /// Whether pixel `(y, x)` falls in a masked cell.
    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.cells[(y / self.patch) * self.grid_w + x / self.patch]
    }

    /// Exact boolean negation on the same grid.
    pub fn complement(&self) -> Self {
        Self {
            cells: self.cells.iter().map(|c| !c).collect(),
            ..self.clone()
        }
    }

    /// Grayscale PGM at pixel resolution: 0 where masked, 255 elsewhere.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.image_w, self.image_h).into_bytes();
        for y in 0..self.image_h {
            for x in 0..self.image_w {
                out.push(if self.is_masked(y, x) { 0 } else { 255 });
            }
        }
        out
    }
}

/// Mask exactly `round(proportion * cells)` cells, chosen uniformly without
/// replacement.
pub fn random_mask(h: usize, w: usize, patch: usize, proportion: f64, seed: u64) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::invalid(format!("mask proportion {proportion} outside [0, 1]")));
    }
    let mut grid = MaskGrid::empty(h, w, patch)?;
    let n = grid.num_cells();
    let count = (proportion * n as f64).round() as usize;
    let mut rng = crate::seeds::rng(seed);
    for i in sample(&mut rng, n, count.min(n)) {
        grid.cells[i] = true;
    }
    Ok(grid)
}

pub fn complement(m: &MaskGrid) -> MaskGrid {
    m.complement()
}

/// Replace every pixel in a masked cell by `fill` (all channels).
pub fn apply_mask(img: &ImageTensor, m: &MaskGrid, fill: f32) -> Result<ImageTensor> {
    if m.image_dims() != (img.height(), img.width()) {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: vec![img.height(), img.width()],
            rhs: vec![m.image_h, m.image_w],
        });
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if m.is_masked(y, x) {
                for c in 0..3 {
                    out.set(c, y, x, fill);
                }
            }
        }
    }
    Ok(out)
}

/// Mask proportion: a constant, or drawn uniformly from `[lo, hi]`.
///
/// In JSON either a bare number or `{"lo": .., "hi": ..}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProportionSpec {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

impl ProportionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProportionSpec::Fixed(p) if (0.0..=1.0).contains(&p) => Ok(()),
            ProportionSpec::Range { lo, hi } if 0.0 <= lo && lo <= hi && hi <= 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid mask proportion {other:?}"))),
        }
    }
}

pub fn sample_proportion(spec: ProportionSpec, seed: u64) -> Result<f64> {
    spec.validate()?;
    Ok(match spec {
        ProportionSpec::Fixed(p) => p,
        ProportionSpec::Range { lo, hi } if lo == hi => lo,
        ProportionSpec::Range { lo, hi } => crate::seeds::rng(seed).gen_range(lo..=hi),
    })
}

/// Which branches see a mask, and how the two masks relate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    None,
    OnlineOnly,
    Independent,
    #[default]
    Complementary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Proportion masked in the online (strong) view.
    pub online: ProportionSpec,
    /// Proportion masked in the momentum (weak) view; unused by the
    /// complementary strategy, whose momentum mask is the exact complement.
    pub momentum: ProportionSpec,
    pub patch: usize,
    /// Fill value in normalized pixel space.
    pub fill: f32,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Complementary,
            online: ProportionSpec::Fixed(0.7),
            momentum: ProportionSpec::Fixed(0.3),
            patch: 16,
            fill: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        Self {
            strategy: MaskStrategy::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.online.validate()?;
        self.momentum.validate()?;
        if self.patch == 0 {
            return Err(Error::invalid("mask patch must be positive"));
        }
        Ok(())
    }
}

/// Masks for the momentum (view #1) and online (view #2) branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub momentum: Option<MaskGrid>,
    pub online: Option<MaskGrid>,
}

/// Build both branch masks for an `h x w` view.
pub fn mask_pair(cfg: &MaskConfig, h: usize, w: usize, seed: u64) -> Result<MaskPair> {
    cfg.validate()?;
    let sub = |k: u64| crate::seeds::mix(seed, k);
    Ok(match cfg.strategy {
        MaskStrategy::None => MaskPair {
            momentum: None,
            online: None,
        },
        MaskStrategy::OnlineOnly => MaskPair {
            momentum: None,
            online: Some(random_mask(h, w, cfg.patch, sample_proportion(cfg.online, sub(0))?, sub(1))?),
        },
        MaskStrategy::Independent => MaskPair {
            online: Some(random_mask(h, w, cfg.patch, sample_proportion(cfg.online, sub(0))?, sub(1))?),
            momentum: Some(random_mask(h, w, cfg.patch, sample_proportion(cfg.momentum, sub(2))?, sub(3))?),
        },
        MaskStrategy::Complementary => {
            let online = random_mask(h, w, cfg.patch, sample_proportion(cfg.online, sub(0))?, sub(1))?;
            MaskPair {
                momentum: Some(online.complement()),
                online: Some(online),
            }
        }
    })
}
