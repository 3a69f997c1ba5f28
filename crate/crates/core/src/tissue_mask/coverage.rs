//! Summed-area table over a binary mask for O(1) window coverage queries.

use serde::{Deserialize, Serialize};

use super::morphology::BinaryMask;
use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Integral image of a mask: entry `(i, j)` counts set bits in rows `< i`
/// and columns `< j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageIndex {
    height: usize,
    width: usize,
    table: Vec<u64>,
}

impl CoverageIndex {
    pub fn build(mask: &BinaryMask) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let stride = w + 1;
        let mut table = vec![0u64; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(mask.get(y, x));
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Self {
            height: h,
            width: w,
            table,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Raw table entry, `i <= height`, `j <= width`.
    pub fn entry(&self, i: usize, j: usize) -> u64 {
        self.table[i * (self.width + 1) + j]
    }

    pub fn total(&self) -> u64 {
        self.entry(self.height, self.width)
    }

    fn check(&self, win: &Window) -> Result<()> {
        if win.area() == 0 {
            return Err(Error::EmptyWindow);
        }
        let fits = win.x.checked_add(win.w).is_some_and(|r| r <= self.width)
            && win.y.checked_add(win.h).is_some_and(|b| b <= self.height);
        if !fits {
            return Err(Error::WindowOutOfBounds {
                x: win.x,
                y: win.y,
                w: win.w,
                h: win.h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Number of set bits inside `win`.
    pub fn window_count(&self, win: &Window) -> Result<u64> {
        self.check(win)?;
        Ok(self.count_unchecked(win.y, win.x, win.y + win.h, win.x + win.w))
    }

    /// Set-bit count over rows `y0..y1`, columns `x0..x1`; bounds are the
    /// caller's responsibility.
    pub(crate) fn count_unchecked(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> u64 {
        self.entry(y1, x1) + self.entry(y0, x0) - self.entry(y0, x1) - self.entry(y1, x0)
    }

    /// Fraction of the window covered by set bits.
    pub fn window_coverage(&self, win: &Window) -> Result<f64> {
        let count = self.window_count(win)?;
        Ok(count as f64 / win.area() as f64)
    }

    /// Row and column of the `rank`-th set bit in row-major order.
    pub(crate) fn nth_set_pixel(&self, rank: u64) -> Option<(usize, usize)> {
        if rank >= self.total() {
            return None;
        }
        let w = self.width;
        // first row whose cumulative count exceeds rank
        let (mut lo, mut hi) = (0usize, self.height);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.entry(mid + 1, w) > rank {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let y = lo;
        let within = rank - self.entry(y, w);
        let row_prefix = |x: usize| self.entry(y + 1, x) - self.entry(y, x);
        let (mut lo, mut hi) = (0usize, w - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if row_prefix(mid + 1) > within {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Some((y, lo))
    }
}
