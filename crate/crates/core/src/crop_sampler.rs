//! Tissue-aware view sampling.
//!
//! A crop is proposed around a uniformly drawn tissue pixel and accepted only
//! when its tissue coverage strictly exceeds `rho`. When every proposal in
//! the attempt budget fails, the best-covered proposal is returned with its
//! `relaxed` flag set so callers can tell the guarantee did not hold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::NormalizedImage;
use crate::rng::log_uniform;
use crate::tissue_mask::{CoverageIndex, Window};

const ASPECT_MIN: f64 = 3.0 / 4.0;
const ASPECT_MAX: f64 = 4.0 / 3.0;

/// Crop area as a fraction of the image area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl ScaleRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn check(&self) -> Result<()> {
        let ok = self.min > 0.0 && self.max <= 1.0 && self.min <= self.max;
        if ok {
            Ok(())
        } else {
            Err(Error::InfeasibleScale(format!(
                "scale range [{}, {}] must lie in (0, 1] with min <= max",
                self.min, self.max
            )))
        }
    }
}

/// Brightness offset drawn from `[-brightness, brightness]` and contrast
/// factor from `[1 - contrast, 1 + contrast]`; zero bounds disable a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterSpec {
    pub brightness: f64,
    pub contrast: f64,
}

impl JitterSpec {
    pub const NONE: JitterSpec = JitterSpec {
        brightness: 0.0,
        contrast: 0.0,
    };
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSpec {
    pub global_scale: ScaleRange,
    pub local_scale: ScaleRange,
    pub n_global: usize,
    pub n_local: usize,
    pub out_size_global: usize,
    pub out_size_local: usize,
    pub rho: f64,
    pub max_attempts: usize,
    pub jitter: JitterSpec,
    /// Photometric jitter for the paired slice views.
    pub pair_jitter: JitterSpec,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            global_scale: ScaleRange::new(0.32, 1.0),
            local_scale: ScaleRange::new(0.05, 0.32),
            n_global: 2,
            n_local: 8,
            out_size_global: 518,
            out_size_local: 224,
            rho: 0.6,
            max_attempts: 32,
            jitter: JitterSpec::default(),
            pair_jitter: JitterSpec {
                brightness: 0.05,
                contrast: 0.05,
            },
        }
    }
}

impl CropSpec {
    /// Checks every field, reporting the first offender as `<prefix>.<field>`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        for (name, range) in [("global_scale", &self.global_scale), ("local_scale", &self.local_scale)] {
            if range.check().is_err() {
                return Err(Error::config(field(name), "must satisfy 0 < min <= max <= 1"));
            }
        }
        if self.n_global < 1 {
            return Err(Error::config(field("n_global"), "must be at least 1"));
        }
        if self.out_size_global < 1 {
            return Err(Error::config(field("out_size_global"), "must be at least 1"));
        }
        if self.n_local > 0 && self.out_size_local < 1 {
            return Err(Error::config(field("out_size_local"), "must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(field("rho"), "must lie in (0, 1]"));
        }
        if self.max_attempts < 1 {
            return Err(Error::config(field("max_attempts"), "must be at least 1"));
        }
        for (name, j) in [("jitter", &self.jitter), ("pair_jitter", &self.pair_jitter)] {
            if !(0.0..=1.0).contains(&j.brightness) {
                return Err(Error::config(
                    format!("{prefix}.{name}.brightness"),
                    "must lie in [0, 1]",
                ));
            }
            if !(0.0..1.0).contains(&j.contrast) {
                return Err(Error::config(format!("{prefix}.{name}.contrast"), "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub window: Window,
    /// Tissue pixel `(y, x)` the proposal was centered on.
    pub anchor: (usize, usize),
    pub coverage: f64,
    pub relaxed: bool,
}

/// A resampled crop with the window it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub crop: CropWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub teacher_views: Vec<View>,
    pub student_views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairViews {
    pub view_a: View,
    pub view_b: View,
}

fn propose<R: Rng + ?Sized>(index: &CoverageIndex, scale: &ScaleRange, rng: &mut R) -> (Window, (usize, usize)) {
    let (h, w) = (index.height(), index.width());
    let rank = rng.gen_range(0..index.total());
    let (ay, ax) = index.nth_set_pixel(rank).expect("rank below total always resolves");
    let area = rng.gen_range(scale.min..=scale.max) * (h * w) as f64;
    let aspect = log_uniform(rng, ASPECT_MIN, ASPECT_MAX);
    let cw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let ch = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x = ax.saturating_sub(cw / 2).min(w - cw);
    let y = ay.saturating_sub(ch / 2).min(h - ch);
    (Window::new(x, y, cw, ch), (ay, ax))
}

/// Samples one coverage-constrained crop window.
pub fn sample_tissue_crop<R: Rng + ?Sized>(
    index: &CoverageIndex,
    scale: ScaleRange,
    rho: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<CropWindow> {
    scale.check()?;
    if max_attempts == 0 {
        return Err(Error::InvalidArgument("max_attempts must be at least 1".into()));
    }
    if index.total() == 0 {
        return Err(Error::NoTissue);
    }
    let mut best: Option<CropWindow> = None;
    for _ in 0..max_attempts {
        let (window, anchor) = propose(index, &scale, rng);
        let count = index.window_count(&window)?;
        let coverage = count as f64 / window.area() as f64;
        let candidate = CropWindow {
            window,
            anchor,
            coverage,
            relaxed: false,
        };
        if coverage > rho {
            return Ok(candidate);
        }
        if best.is_none_or(|b| coverage > b.coverage) {
            best = Some(candidate);
        }
    }
    let mut fallback = best.expect("at least one attempt");
    fallback.relaxed = true;
    Ok(fallback)
}

/// Bilinear resample of `win` to an `out x out` block, pixel centers aligned.
pub fn resize_window(img: &NormalizedImage, win: &Window, out: usize) -> Vec<f64> {
    let axis = |len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(win.h);
    let xs = axis(win.w);
    let mut pixels = Vec::with_capacity(out * out);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| img.get(win.y + y, win.x + x);
            let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
            let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
            pixels.push((1.0 - fy) * top + fy * bottom);
        }
    }
    pixels
}

fn apply_jitter<R: Rng + ?Sized>(pixels: &[f64], jitter: &JitterSpec, rng: &mut R) -> Vec<f32> {
    let offset = if jitter.brightness > 0.0 {
        rng.gen_range(-jitter.brightness..=jitter.brightness)
    } else {
        0.0
    };
    let gain = if jitter.contrast > 0.0 {
        rng.gen_range(1.0 - jitter.contrast..=1.0 + jitter.contrast)
    } else {
        1.0
    };
    pixels
        .iter()
        .map(|&v| ((v - 0.5) * gain + 0.5 + offset).clamp(0.0, 1.0) as f32)
        .collect()
}

fn render<R: Rng + ?Sized>(
    img: &NormalizedImage,
    crop: CropWindow,
    size: usize,
    jitter: &JitterSpec,
    rng: &mut R,
) -> View {
    let resized = resize_window(img, &crop.window, size);
    View {
        size,
        pixels: apply_jitter(&resized, jitter, rng),
        crop,
    }
}

fn check_dims(img: &NormalizedImage, index: &CoverageIndex) -> Result<()> {
    if img.height() != index.height() || img.width() != index.width() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            index.height(),
            index.width()
        )));
    }
    Ok(())
}

/// Teacher views are `n_global` global crops; the student sees the same
/// global views followed by `n_local` local crops.
pub fn sample_view_sets<R: Rng + ?Sized>(
    img: &NormalizedImage,
    index: &CoverageIndex,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<ViewSet> {
    check_dims(img, index)?;
    let mut teacher_views = Vec::with_capacity(spec.n_global);
    for _ in 0..spec.n_global {
        let crop = sample_tissue_crop(index, spec.global_scale, spec.rho, spec.max_attempts, rng)?;
        teacher_views.push(render(img, crop, spec.out_size_global, &spec.jitter, rng));
    }
    let mut student_views = teacher_views.clone();
    student_views.reserve(spec.n_local);
    for _ in 0..spec.n_local {
        let crop = sample_tissue_crop(index, spec.local_scale, spec.rho, spec.max_attempts, rng)?;
        student_views.push(render(img, crop, spec.out_size_local, &spec.jitter, rng));
    }
    Ok(ViewSet {
        teacher_views,
        student_views,
    })
}

/// One global window sampled on `slice_a`'s mask and cut from both slices at
/// identical coordinates. Only photometric jitter is applied, drawn
/// independently per view.
pub fn conservative_pair_transform<R: Rng + ?Sized>(
    slice_a: &NormalizedImage,
    slice_b: &NormalizedImage,
    index_a: &CoverageIndex,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<PairViews> {
    if slice_a.height() != slice_b.height() || slice_a.width() != slice_b.width() {
        return Err(Error::ShapeMismatch(format!(
            "slice {}x{} vs {}x{}",
            slice_a.height(),
            slice_a.width(),
            slice_b.height(),
            slice_b.width()
        )));
    }
    check_dims(slice_a, index_a)?;
    let crop = sample_tissue_crop(index_a, spec.global_scale, spec.rho, spec.max_attempts, rng)?;
    let view_a = render(slice_a, crop, spec.out_size_global, &spec.pair_jitter, rng);
    let view_b = render(slice_b, crop, spec.out_size_global, &spec.pair_jitter, rng);
    Ok(PairViews { view_a, view_b })
}
