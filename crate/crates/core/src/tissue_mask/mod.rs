//! Breast-tissue mask construction: percentile threshold on the normalized
//! image, then closing and opening with a square kernel.

pub mod coverage;
pub mod morphology;

use serde::{Deserialize, Serialize};

pub use coverage::{CoverageIndex, Window};
pub use morphology::{close, dilate, erode, open, BinaryMask, MorphKernel};

use crate::error::Result;
use crate::preprocess::{percentile, NormalizedImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Threshold percentile in `[0, 100]`.
    pub tau: f64,
    /// Odd side length of the square closing/opening kernel.
    pub kernel: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { tau: 50.0, kernel: 9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    mask: BinaryMask,
    tau_used: f64,
    theta: f64,
}

impl TissueMask {
    /// Wraps an existing binary grid, e.g. a rasterized ground truth.
    pub fn from_mask(mask: BinaryMask, tau_used: f64, theta: f64) -> Self {
        Self { mask, tau_used, theta }
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn tau_used(&self) -> f64 {
        self.tau_used
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.mask.count_ones() as f64 / self.mask.bits().len() as f64
    }

    pub fn coverage_index(&self) -> CoverageIndex {
        CoverageIndex::build(&self.mask)
    }
}

/// `open(close(1[x > percentile(x, tau)]))`. Ties at the threshold are
/// background.
pub fn build_mask(img: &NormalizedImage, params: &MaskParams) -> Result<TissueMask> {
    let kernel = MorphKernel::square(params.kernel)?;
    let theta = percentile(img.values(), params.tau)?;
    let raw = BinaryMask::new(
        img.height(),
        img.width(),
        img.values().iter().map(|&v| v > theta).collect(),
    )?;
    let mask = open(&close(&raw, kernel), kernel);
    Ok(TissueMask {
        mask,
        tau_used: params.tau,
        theta,
    })
}
