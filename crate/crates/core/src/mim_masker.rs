//! Tissue-aware block masking on the token grid.
//!
//! Pieces are added until exactly `m` tokens are masked. Each piece draws a
//! target area, derives a near-square shape, scores every top-left position
//! by the mean tissue coverage under the piece, drops positions below the
//! current threshold and samples the rest with weight `w_t * coverage + eps`.
//! A piece is kept only if it masks at least one new token and no more than
//! `min(m_max, m - masked)`. When no position survives, or `patience`
//! consecutive pieces are rejected, the threshold drops by `relax_step`.
//! Once the threshold is zero and patience runs out again, the remaining
//! budget is filled with the highest-coverage unmasked tokens in row-major
//! order, so the sampler always terminates with `|omega| == m`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::log_uniform;
use crate::tissue_mask::{CoverageIndex, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl TokenGrid {
    /// Smallest grid whose patches cover an `height x width` image.
    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot tile {height}x{width} with patch {patch_size}"
            )));
        }
        Ok(Self {
            rows: height.div_ceil(patch_size),
            cols: width.div_ceil(patch_size),
            patch_size,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Per-token tissue fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCoverage {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TokenCoverage {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coverage values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("token coverage must lie in [0, 1]".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Token coverage for a whole image; patches hanging past the border count
/// their missing pixels as background.
pub fn token_coverage_grid(index: &CoverageIndex, grid: &TokenGrid) -> Result<TokenCoverage> {
    let p = grid.patch_size;
    if grid.rows * p < index.height() || grid.cols * p < index.width() || p == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} grid of {p}px patches does not cover {}x{} mask",
            grid.rows,
            grid.cols,
            index.height(),
            index.width()
        )));
    }
    let area = (p * p) as f64;
    let mut values = Vec::with_capacity(grid.tokens());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let y0 = (r * p).min(index.height());
            let y1 = ((r + 1) * p).min(index.height());
            let x0 = (c * p).min(index.width());
            let x1 = ((c + 1) * p).min(index.width());
            values.push(index.count_unchecked(y0, x0, y1, x1) as f64 / area);
        }
    }
    TokenCoverage::new(grid.rows, grid.cols, values)
}

/// Token coverage of a crop: the window is split into `rows x cols` cells
/// in source pixel coordinates, each at least one pixel.
pub fn view_token_coverage(index: &CoverageIndex, window: &Window, rows: usize, cols: usize) -> Result<TokenCoverage> {
    index.window_count(window)?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("token grid must be non-empty".into()));
    }
    let cell = |i: usize, n: usize, start: usize, len: usize| {
        let a = start + i * len / n;
        let b = (start + (i + 1) * len / n).max(a + 1);
        (a, b)
    };
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = cell(r, rows, window.y, window.h);
        for c in 0..cols {
            let (x0, x1) = cell(c, cols, window.x, window.w);
            let count = index.count_unchecked(y0, x0, y1, x1);
            values.push(count as f64 / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    TokenCoverage::new(rows, cols, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    /// Target number of masked tokens.
    pub m: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub rho: f64,
    pub w_t: f64,
    pub eps: f64,
    pub relax_step: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Consecutive rejected pieces tolerated before relaxing.
    pub patience: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            m: 0,
            m_min: 4,
            m_max: 196,
            rho: 0.5,
            w_t: 1.0,
            eps: 1e-6,
            relax_step: 0.05,
            aspect_min: 0.5,
            aspect_max: 2.0,
            patience: 10,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, grid_tokens: usize) -> Result<()> {
        if self.m > grid_tokens {
            return Err(Error::MaskBudgetTooLarge {
                m: self.m,
                grid: grid_tokens,
            });
        }
        let bad = |msg: &str| Err(Error::InvalidMaskSpec(msg.into()));
        if self.m_min < 1 || self.m_min > self.m_max {
            return bad("need 1 <= m_min <= m_max");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        let ok = self.w_t >= 0.0 && self.eps > 0.0 && self.relax_step > 0.0;
        if !ok {
            return bad("need w_t >= 0, eps > 0, relax_step > 0");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return bad("need 0 < aspect_min <= aspect_max");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    rows: usize,
    cols: usize,
    z: Vec<bool>,
    omega: Vec<(usize, usize)>,
}

impl TokenMask {
    pub fn from_bits(rows: usize, cols: usize, z: Vec<bool>) -> Result<Self> {
        if rows * cols != z.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {rows}x{cols} token grid",
                z.len()
            )));
        }
        let omega = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter(|&(r, c)| z[r * cols + c])
            .collect();
        Ok(Self { rows, cols, z, omega })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.z
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.z[row * self.cols + col]
    }

    pub fn omega(&self) -> &[(usize, usize)] {
        &self.omega
    }

    pub fn count(&self) -> usize {
        self.omega.len()
    }
}

/// Row-major list of masked token coordinates.
pub fn masked_indices(mask: &TokenMask) -> Vec<(usize, usize)> {
    mask.omega.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPiece {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
    pub new_tokens: usize,
}

/// What happened while sampling one mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskTrace {
    pub pieces: Vec<MaskPiece>,
    pub relax_rounds: usize,
    pub final_rho: f64,
    /// Tokens placed by the terminal fill rather than by pieces.
    pub filled: usize,
}

struct PrefixSums {
    cols: usize,
    table: Vec<f64>,
}

impl PrefixSums {
    fn new(cov: &TokenCoverage) -> Self {
        let stride = cov.cols + 1;
        let mut table = vec![0.0; (cov.rows + 1) * stride];
        for r in 0..cov.rows {
            let mut row = 0.0;
            for c in 0..cov.cols {
                row += cov.get(r, c);
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row;
            }
        }
        Self { cols: cov.cols, table }
    }

    fn sum(&self, r: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.cols + 1;
        let at = |i: usize, j: usize| self.table[i * s + j];
        at(r + h, c + w) - at(r, c + w) - at(r + h, c) + at(r, c)
    }
}

pub fn sample_block_mask<R: Rng + ?Sized>(cov: &TokenCoverage, spec: &MaskSpec, rng: &mut R) -> Result<TokenMask> {
    sample_block_mask_traced(cov, spec, rng).map(|(mask, _)| mask)
}

pub fn sample_block_mask_traced<R: Rng + ?Sized>(
    cov: &TokenCoverage,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(TokenMask, MaskTrace)> {
    let (rows, cols) = (cov.rows, cov.cols);
    spec.validate(rows * cols)?;
    let sums = PrefixSums::new(cov);
    let mut z = vec![false; rows * cols];
    let mut count = 0usize;
    let mut rho = spec.rho;
    let mut rejections = 0usize;
    let mut trace = MaskTrace::default();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut cumulative: Vec<f64> = Vec::new();

    while count < spec.m {
        let limit = spec.m_max.min(spec.m - count);
        let area = rng.gen_range(spec.m_min.min(limit)..=limit);
        let aspect = log_uniform(rng, spec.aspect_min, spec.aspect_max);
        let af = area as f64;
        let mut ph = ((af * aspect).sqrt().round() as usize).clamp(1, rows);
        let mut pw = ((af / aspect).sqrt().round() as usize).clamp(1, cols);
        while ph * pw > limit {
            if ph >= pw && ph > 1 {
                ph -= 1;
            } else {
                pw -= 1;
            }
        }

        candidates.clear();
        cumulative.clear();
        let piece_area = (ph * pw) as f64;
        let mut total = 0.0;
        for r in 0..=rows - ph {
            for c in 0..=cols - pw {
                let mean = sums.sum(r, c, ph, pw) / piece_area;
                if mean >= rho - 1e-12 {
                    total += spec.w_t * mean.max(0.0) + spec.eps;
                    candidates.push((r, c));
                    cumulative.push(total);
                }
            }
        }

        let accepted = if candidates.is_empty() {
            None
        } else {
            let target = rng.gen_range(0.0..total);
            let pick = cumulative.partition_point(|&w| w <= target).min(candidates.len() - 1);
            let (r, c) = candidates[pick];
            let fresh = (r..r + ph)
                .flat_map(|y| (c..c + pw).map(move |x| y * cols + x))
                .filter(|&i| !z[i])
                .count();
            (fresh > 0 && fresh <= limit).then_some((r, c, fresh))
        };

        match accepted {
            Some((r, c, fresh)) => {
                for y in r..r + ph {
                    z[y * cols + c..y * cols + c + pw].fill(true);
                }
                count += fresh;
                rejections = 0;
                trace.pieces.push(MaskPiece {
                    row: r,
                    col: c,
                    h: ph,
                    w: pw,
                    new_tokens: fresh,
                });
            }
            None => {
                rejections += 1;
                if candidates.is_empty() || rejections >= spec.patience {
                    rejections = 0;
                    if rho <= 0.0 {
                        trace.filled = fill_remaining(cov, &mut z, spec.m - count);
                        count = spec.m;
                    } else {
                        rho = spec.rho - (trace.relax_rounds + 1) as f64 * spec.relax_step;
                        // snap accumulated rounding onto zero
                        if rho < 1e-12 {
                            rho = 0.0;
                        }
                        trace.relax_rounds += 1;
                    }
                }
            }
        }
    }
    trace.final_rho = rho;
    Ok((TokenMask::from_bits(rows, cols, z)?, trace))
}

/// Masks `n` more tokens by descending coverage, ties in row-major order.
fn fill_remaining(cov: &TokenCoverage, z: &mut [bool], n: usize) -> usize {
    let mut open: Vec<usize> = (0..z.len()).filter(|&i| !z[i]).collect();
    open.sort_by(|&a, &b| cov.values[b].total_cmp(&cov.values[a]).then(a.cmp(&b)));
    for &i in open.iter().take(n) {
        z[i] = true;
    }
    n.min(open.len())
}
