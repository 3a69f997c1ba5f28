//! Binary morphology with square structuring elements.
//!
//! Both dilation and erosion treat positions outside the grid as unset: a
//! dilated pixel is set when any in-bounds neighbour is set, an eroded pixel
//! is set only when every kernel position is in bounds and set. Square
//! kernels are separable, so each operator runs as a row pass followed by a
//! column pass over running counts, O(H·W) regardless of kernel size.

use crate::error::{Error, Result};

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || height.checked_mul(width) != Some(bits.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Square structuring element with an odd side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MorphKernel {
    side: usize,
}

impl MorphKernel {
    pub fn square(side: usize) -> Result<Self> {
        if side == 0 || side.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel side must be odd and positive, got {side}"
            )));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }
}

impl Default for MorphKernel {
    fn default() -> Self {
        Self { side: 9 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    Dilate,
    Erode,
}

/// One separable pass along a line of `len` samples read through `get`.
fn line_pass(len: usize, radius: usize, op: Op, get: impl Fn(usize) -> bool, out: &mut [bool]) {
    let mut prefix = Vec::with_capacity(len + 1);
    prefix.push(0usize);
    for i in 0..len {
        prefix.push(prefix[i] + usize::from(get(i)));
    }
    for (i, o) in out.iter_mut().enumerate().take(len) {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(len);
        let count = prefix[hi] - prefix[lo];
        *o = match op {
            Op::Dilate => count > 0,
            Op::Erode => i >= radius && i + radius < len && count == 2 * radius + 1,
        };
    }
}

fn apply(mask: &BinaryMask, kernel: MorphKernel, op: Op) -> BinaryMask {
    let (h, w, r) = (mask.height, mask.width, kernel.radius());
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let src = &mask.bits[y * w..(y + 1) * w];
        line_pass(w, r, op, |x| src[x], &mut rows[y * w..(y + 1) * w]);
    }
    let mut bits = vec![false; h * w];
    let mut column = vec![false; h];
    for x in 0..w {
        line_pass(h, r, op, |y| rows[y * w + x], &mut column);
        for (y, &b) in column.iter().enumerate() {
            bits[y * w + x] = b;
        }
    }
    BinaryMask {
        height: h,
        width: w,
        bits,
    }
}

pub fn dilate(mask: &BinaryMask, kernel: MorphKernel) -> BinaryMask {
    apply(mask, kernel, Op::Dilate)
}

pub fn erode(mask: &BinaryMask, kernel: MorphKernel) -> BinaryMask {
    apply(mask, kernel, Op::Erode)
}

/// Dilation followed by erosion.
pub fn close(mask: &BinaryMask, kernel: MorphKernel) -> BinaryMask {
    erode(&dilate(mask, kernel), kernel)
}

/// Erosion followed by dilation.
pub fn open(mask: &BinaryMask, kernel: MorphKernel) -> BinaryMask {
    dilate(&erode(mask, kernel), kernel)
}
