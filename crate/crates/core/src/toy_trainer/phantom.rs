//! Synthetic mammogram phantoms: a textured ellipse on a zero background
//! with sparse salt noise, plus a slice stack whose ellipse drifts slowly
//! with depth.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dbt_pairs::DbtVolume;
use crate::error::{Error, Result};
use crate::preprocess::NormalizedImage;
use crate::tissue_mask::{BinaryMask, TissueMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Semi-axis range as a fraction of `size`.
    pub axes_min: f64,
    pub axes_max: f64,
    /// Amplitude of per-pixel uniform noise inside tissue.
    pub texture_noise: f64,
    /// Probability that a background pixel is a salt speck.
    pub salt_prob: f64,
    pub lesion_prob: f64,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub slices: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            axes_min: 0.30,
            axes_max: 0.375,
            texture_noise: 0.08,
            salt_prob: 0.002,
            lesion_prob: 0.3,
            lesion_radius_min: 2.0,
            lesion_radius_max: 5.0,
            slices: 8,
        }
    }
}

/// Largest centre offset, as a fraction of `size`.
const MAX_SHIFT: f64 = 0.05;
/// Ellipse shrink at the outermost slice.
const DEPTH_SHRINK: f64 = 0.15;

impl PhantomSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if self.size < 8 {
            return Err(Error::config(field("size"), "must be at least 8"));
        }
        if !(self.axes_min > 0.0 && self.axes_min <= self.axes_max) {
            return Err(Error::config(field("axes_min"), "need 0 < axes_min <= axes_max"));
        }
        if self.axes_max + MAX_SHIFT > 0.5 {
            return Err(Error::config(
                field("axes_max"),
                "ellipse must fit the image (axes_max <= 0.45)",
            ));
        }
        if !(0.0..=0.5).contains(&self.texture_noise) {
            return Err(Error::config(field("texture_noise"), "must lie in [0, 0.5]"));
        }
        for (name, p) in [("salt_prob", self.salt_prob), ("lesion_prob", self.lesion_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field(name), "must lie in [0, 1]"));
            }
        }
        if !(self.lesion_radius_min > 0.0 && self.lesion_radius_min <= self.lesion_radius_max) {
            return Err(Error::config(
                field("lesion_radius_min"),
                "need 0 < lesion_radius_min <= lesion_radius_max",
            ));
        }
        if self.slices < 1 {
            return Err(Error::config(field("slices"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: NormalizedImage,
    pub truth: TissueMask,
    pub volume: DbtVolume,
    /// Semi-axes `(a, b)` in pixels of the 2D image's ellipse.
    pub axes: (f64, f64),
}

struct Layout {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    waves: [(f64, f64, f64); 3],
    lesion: Option<(f64, f64, f64)>,
}

impl Layout {
    /// Normalized elliptical radius of pixel centre `(y, x)` at scale `s`.
    fn radius(&self, y: usize, x: usize, s: f64) -> f64 {
        let dy = (y as f64 + 0.5 - self.cy) / (self.b * s);
        let dx = (x as f64 + 0.5 - self.cx) / (self.a * s);
        dy * dy + dx * dx
    }

    fn tissue(&self, y: usize, x: usize, s: f64, phase: f64, noise: f64) -> f64 {
        let r2 = self.radius(y, x, s);
        let (fy, fx) = (y as f64, x as f64);
        let texture = self
            .waves
            .iter()
            .map(|&(ky, kx, ph)| libm::sin(ky * fy + kx * fx + ph + phase))
            .sum::<f64>()
            / 6.0
            + 0.5;
        // thinner tissue towards the skin line
        let falloff = 0.6 + 0.4 * libm::sqrt((1.0 - r2).max(0.0));
        let mut v = (0.3 + 0.5 * texture) * falloff + noise;
        if let Some((ly, lx, lr)) = self.lesion {
            let d2 = (fy + 0.5 - ly).powi(2) + (fx + 0.5 - lx).powi(2);
            if d2 <= lr * lr * s * s {
                v += 0.25;
            }
        }
        v.clamp(0.3, 1.0)
    }
}

fn render<R: Rng + ?Sized>(
    layout: &Layout,
    spec: &PhantomSpec,
    scale: f64,
    phase: f64,
    rng: &mut R,
) -> Result<NormalizedImage> {
    let n = spec.size;
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v = if layout.radius(y, x, scale) <= 1.0 {
                let noise = if spec.texture_noise > 0.0 {
                    rng.gen_range(-spec.texture_noise..=spec.texture_noise)
                } else {
                    0.0
                };
                layout.tissue(y, x, scale, phase, noise)
            } else if rng.gen_bool(spec.salt_prob) {
                rng.gen_range(0.05..0.3)
            } else {
                0.0
            };
            values.push(v);
        }
    }
    NormalizedImage::new(n, n, values)
}

/// Draws one phantom. The 2D image uses the full-size ellipse; slice `k`
/// shrinks it by up to 15% towards the stack ends and shifts the texture
/// phase slowly with `k`.
pub fn generate_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    spec.validate("phantom")?;
    let n = spec.size as f64;
    let a = rng.gen_range(spec.axes_min..=spec.axes_max) * n;
    let b = rng.gen_range(spec.axes_min..=spec.axes_max) * n;
    let cy = n / 2.0 + rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) * n;
    let cx = n / 2.0 + rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) * n;
    let mut waves = [(0.0, 0.0, 0.0); 3];
    for w in &mut waves {
        let freq = rng.gen_range(0.15..0.6);
        let angle = rng.gen_range(0.0..PI);
        *w = (
            freq * libm::sin(angle),
            freq * libm::cos(angle),
            rng.gen_range(0.0..2.0 * PI),
        );
    }
    let lesion = if rng.gen_bool(spec.lesion_prob) {
        let t = rng.gen_range(0.0..2.0 * PI);
        let r = rng.gen_range(0.0..0.6);
        Some((
            cy + r * b * libm::sin(t),
            cx + r * a * libm::cos(t),
            rng.gen_range(spec.lesion_radius_min..=spec.lesion_radius_max),
        ))
    } else {
        None
    };
    let layout = Layout {
        cy,
        cx,
        a,
        b,
        waves,
        lesion,
    };

    let image = render(&layout, spec, 1.0, 0.0, rng)?;
    let truth_bits = BinaryMask::from_fn(spec.size, spec.size, |y, x| layout.radius(y, x, 1.0) <= 1.0)?;
    let truth = TissueMask::from_mask(truth_bits, 0.0, 0.0);

    let mid = (spec.slices as f64 - 1.0) / 2.0;
    let mut slices = Vec::with_capacity(spec.slices);
    for k in 0..spec.slices {
        let depth = if mid > 0.0 { (k as f64 - mid).abs() / mid } else { 0.0 };
        let scale = 1.0 - DEPTH_SHRINK * depth;
        slices.push(render(&layout, spec, scale, 0.15 * k as f64, rng)?);
    }
    let volume = DbtVolume::new("phantom", slices)?;
    Ok(Phantom {
        image,
        truth,
        volume,
        axes: (a, b),
    })
}
