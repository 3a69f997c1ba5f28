//! DBT volumes as slice stacks and adjacent-slice pair sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crop_sampler::{conservative_pair_transform, CropSpec, PairViews};
use crate::error::{Error, Result};
use crate::preprocess::NormalizedImage;
use crate::tissue_mask::{build_mask, MaskParams};

#[derive(Debug, Clone, PartialEq)]
pub struct DbtVolume {
    volume_id: String,
    slices: Vec<NormalizedImage>,
}

impl DbtVolume {
    pub fn new(volume_id: impl Into<String>, slices: Vec<NormalizedImage>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("volume needs at least one slice".into()))?;
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = slices.iter().position(|s| s.height() != h || s.width() != w) {
            return Err(Error::ShapeMismatch(format!(
                "slice {bad} is {}x{}, slice 0 is {h}x{w}",
                slices[bad].height(),
                slices[bad].width()
            )));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            slices,
        })
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn slices(&self) -> &[NormalizedImage] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &NormalizedImage {
        &self.slices[k]
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlicePair {
    pub k: usize,
    pub k_prime: usize,
    pub d: usize,
    /// `+1` when `k_prime = k + d`, `-1` when `k_prime = k - d`.
    pub direction: i8,
}

/// Draws `(k, k ± d)` from a stack of `slice_count` slices.
///
/// The offset is uniform on `1..=min(d_max, slice_count - 1)`; the base index
/// is then uniform over the slices with at least one in-bounds partner at that
/// offset, and the direction uniform over whichever of `±d` stay in bounds.
pub fn sample_slice_pair_in<R: Rng + ?Sized>(slice_count: usize, d_max: usize, rng: &mut R) -> Result<SlicePair> {
    if slice_count < 2 {
        return Err(Error::SingleSliceVolume);
    }
    if d_max < 1 {
        return Err(Error::InvalidArgument("d_max must be at least 1".into()));
    }
    let d = rng.gen_range(1..=d_max.min(slice_count - 1));
    // valid bases: [0, K-d) has a forward partner, [d, K) a backward one
    let forward = slice_count - d;
    let backward_only_start = forward.max(d);
    let valid = forward + (slice_count - backward_only_start);
    let pick = rng.gen_range(0..valid);
    let k = if pick < forward {
        pick
    } else {
        backward_only_start + (pick - forward)
    };
    let up = k + d < slice_count;
    let down = k >= d;
    let direction: i8 = match (up, down) {
        (true, true) => {
            if rng.gen_bool(0.5) {
                1
            } else {
                -1
            }
        }
        (true, false) => 1,
        (false, true) => -1,
        (false, false) => unreachable!("base index chosen from valid set"),
    };
    let k_prime = if direction > 0 { k + d } else { k - d };
    Ok(SlicePair {
        k,
        k_prime,
        d,
        direction,
    })
}

pub fn sample_slice_pair<R: Rng + ?Sized>(vol: &DbtVolume, d_max: usize, rng: &mut R) -> Result<SlicePair> {
    sample_slice_pair_in(vol.len(), d_max, rng)
}

/// Builds the tissue mask on slice `k` and cuts both slices at one shared
/// window.
pub fn make_pair_views<R: Rng + ?Sized>(
    vol: &DbtVolume,
    pair: &SlicePair,
    mask_params: &MaskParams,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<PairViews> {
    if pair.k >= vol.len() || pair.k_prime >= vol.len() {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) outside a {}-slice volume",
            pair.k,
            pair.k_prime,
            vol.len()
        )));
    }
    let base = vol.slice(pair.k);
    let mask = build_mask(base, mask_params)?;
    let index = mask.coverage_index();
    conservative_pair_transform(base, vol.slice(pair.k_prime), &index, spec, rng)
}
