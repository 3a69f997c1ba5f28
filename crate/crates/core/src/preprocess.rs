//! Raster types and the intensity preprocessing chain: 16-bit to 8-bit
//! conversion, min-max normalization, CLAHE and nearest-rank percentiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

pub type RasterImage16 = Raster<u16>;
pub type RasterImage8 = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        check_shape(height, width, pixels.len())?;
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }
}

fn check_shape(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be positive, got {height}x{width}"
        )));
    }
    if height.checked_mul(width) != Some(len) {
        return Err(Error::InvalidImage(format!(
            "{len} pixels do not fill a {height}x{width} raster"
        )));
    }
    Ok(())
}

/// Real-valued image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl NormalizedImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(height, width, values.len())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("normalized value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Round-half-up quantization to 8 bits.
    pub fn to_u8(&self) -> RasterImage8 {
        let pixels = self.values.iter().map(|&v| quantize_u8(255.0 * v)).collect();
        Raster {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// Read access shared by every raster flavour.
pub trait GrayRaster {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn intensity(&self, index: usize) -> f64;

    fn len(&self) -> usize {
        self.height() * self.width()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GrayRaster for Raster<u8> {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn intensity(&self, index: usize) -> f64 {
        f64::from(self.pixels[index])
    }
}

impl GrayRaster for Raster<u16> {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn intensity(&self, index: usize) -> f64 {
        f64::from(self.pixels[index])
    }
}

impl GrayRaster for NormalizedImage {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn intensity(&self, index: usize) -> f64 {
        self.values[index]
    }
}

fn min_max<I: GrayRaster + ?Sized>(img: &I) -> (f64, f64) {
    (0..img.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        let v = img.intensity(i);
        (lo.min(v), hi.max(v))
    })
}

pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Linear stretch of the 16-bit range onto `0..=255`, rounding half up.
/// A constant image maps to all zeros.
pub fn to_8bit(img: &RasterImage16) -> RasterImage8 {
    let (lo, hi) = min_max(img);
    let pixels = if hi > lo {
        let scale = 255.0 / (hi - lo);
        img.pixels
            .iter()
            .map(|&v| quantize_u8(scale * (f64::from(v) - lo)))
            .collect()
    } else {
        vec![0; img.pixels.len()]
    };
    Raster {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// `(x - min) / (max - min)`; a constant image maps to all zeros.
pub fn min_max_normalize<I: GrayRaster + ?Sized>(img: &I) -> NormalizedImage {
    let (lo, hi) = min_max(img);
    let values = if hi > lo {
        let span = hi - lo;
        (0..img.len())
            .map(|i| ((img.intensity(i) - lo) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.len()]
    };
    NormalizedImage {
        height: img.height(),
        width: img.width(),
        values,
    }
}

/// Nearest-rank percentile: the `ceil(tau/100 * n)`-th smallest value,
/// with `tau = 0` giving the minimum. Always returns a member of `values`.
pub fn percentile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("percentile {tau} outside [0, 100]")));
    }
    let n = values.len();
    let exact = tau * n as f64 / 100.0;
    // tau * n / 100 can land a hair above an integer rank through rounding
    let rank = if (exact - exact.round()).abs() < 1e-9 {
        exact.round()
    } else {
        exact.ceil()
    };
    let rank = (rank as usize).clamp(1, n);
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tiles_y: usize,
    pub tiles_x: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles_y: 8,
            tiles_x: 8,
        }
    }
}

fn tile_bounds(n: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * n / tiles, (i + 1) * n / tiles)).collect()
}

/// Per-pixel (lower tile, upper tile, weight of upper) along one axis.
fn interpolation_axis(n: usize, bounds: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = bounds.iter().map(|&(s, e)| (s + e - 1) as f64 / 2.0).collect();
    let last = centers.len() - 1;
    (0..n)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[last] {
                return (last, last, 0.0);
            }
            let i = centers.partition_point(|&c| c <= p) - 1;
            let w = (p - centers[i]) / (centers[i + 1] - centers[i]);
            (i, i + 1, w)
        })
        .collect()
}

fn clip_histogram(hist: &mut [u64; 256], limit: u64) {
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let each = excess / 256;
    let residual = (excess % 256) as usize;
    for h in hist.iter_mut() {
        *h += each;
    }
    if let Some(step) = 256usize.checked_div(residual) {
        for i in (0..256).step_by(step).take(residual) {
            hist[i] += 1;
        }
    }
}

/// Contrast limited adaptive histogram equalization.
///
/// Each tile's histogram is clipped at `clip_limit * tile_pixels / 256`
/// (at least one count), the clipped mass is spread evenly over all bins,
/// and the tile's cumulative histogram maps intensities onto the image's
/// own `[min, max]` range. Output pixels bilinearly blend the mappings of the
/// four nearest tile centers. Images smaller than the tile grid fall back to
/// a single tile.
pub fn clahe(img: &RasterImage8, params: &ClaheParams) -> Result<RasterImage8> {
    if params.clip_limit.is_nan() || params.clip_limit <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip limit must be positive, got {}",
            params.clip_limit
        )));
    }
    if params.tiles_y == 0 || params.tiles_x == 0 {
        return Err(Error::InvalidArgument("tile grid must be at least 1x1".into()));
    }
    let (h, w) = (img.height, img.width);
    let (ty, tx) = if h < params.tiles_y || w < params.tiles_x {
        (1, 1)
    } else {
        (params.tiles_y, params.tiles_x)
    };
    let rows = tile_bounds(h, ty);
    let cols = tile_bounds(w, tx);
    let (lo, hi) = min_max(img);
    let span = hi - lo;

    let mut luts = vec![[0f64; 256]; ty * tx];
    for (ti, &(y0, y1)) in rows.iter().enumerate() {
        for (tj, &(x0, x1)) in cols.iter().enumerate() {
            let mut hist = [0u64; 256];
            for y in y0..y1 {
                for &v in &img.pixels[y * w + x0..y * w + x1] {
                    hist[v as usize] += 1;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            let limit = (params.clip_limit * n as f64 / 256.0).min(u64::MAX as f64) as u64;
            clip_histogram(&mut hist, limit.max(1));
            let lut = &mut luts[ti * tx + tj];
            let mut cdf = 0u64;
            for (v, &count) in hist.iter().enumerate() {
                cdf += count;
                lut[v] = lo + span * (cdf as f64 / n as f64).min(1.0);
            }
        }
    }

    let ry = interpolation_axis(h, &rows);
    let rx = interpolation_axis(w, &cols);
    let mut pixels = Vec::with_capacity(h * w);
    for (y, &(i0, i1, wy)) in ry.iter().enumerate() {
        for (x, &(j0, j1, wx)) in rx.iter().enumerate() {
            let v = img.pixels[y * w + x] as usize;
            let top = (1.0 - wx) * luts[i0 * tx + j0][v] + wx * luts[i0 * tx + j1][v];
            let bottom = (1.0 - wx) * luts[i1 * tx + j0][v] + wx * luts[i1 * tx + j1][v];
            pixels.push(quantize_u8((1.0 - wy) * top + wy * bottom));
        }
    }
    Ok(Raster {
        height: h,
        width: w,
        pixels,
    })
}

/// Global histogram equalization onto the image's `[min, max]` range.
pub fn equalize_histogram(img: &RasterImage8) -> RasterImage8 {
    let mut hist = [0u64; 256];
    for &v in &img.pixels {
        hist[v as usize] += 1;
    }
    let (lo, hi) = min_max(img);
    let n = img.pixels.len() as f64;
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (v, &count) in hist.iter().enumerate() {
        cdf += count;
        lut[v] = quantize_u8(lo + (hi - lo) * cdf as f64 / n);
    }
    Raster {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|&v| lut[v as usize]).collect(),
    }
}

/// Full intensity chain for a raw 16-bit raster: 8-bit conversion, min-max
/// normalization, then CLAHE on the normalized image's 8-bit quantization.
pub fn preprocess(img: &RasterImage16, clahe_params: Option<&ClaheParams>) -> Result<NormalizedImage> {
    let eight = to_8bit(img);
    let normalized = min_max_normalize(&eight);
    match clahe_params {
        Some(params) => {
            let equalized = clahe(&normalized.to_u8(), params)?;
            Ok(min_max_normalize(&equalized))
        }
        None => Ok(normalized),
    }
}
