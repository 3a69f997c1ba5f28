//! Structured text (TOML) configuration for every stage. Missing sections
//! and fields take their defaults; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crop_sampler::CropSpec;
use crate::error::{Error, Result};
use crate::mim_masker::MaskSpec;
use crate::preprocess::ClaheParams;
use crate::ssl_losses::{LossWeights, Temperatures};
use crate::tissue_mask::MaskParams;
use crate::toy_trainer::ToyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clahe_enabled: bool,
    pub clahe: ClaheParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clahe_enabled: true,
            clahe: ClaheParams::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn clahe_params(&self) -> Option<&ClaheParams> {
        self.clahe_enabled.then_some(&self.clahe)
    }
}

/// Token masking for global views. The budget per view is
/// `round(mask_ratio * rows * cols)` on a `ceil(size / patch_size)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub enabled: bool,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub m_min: usize,
    pub m_max: usize,
    pub rho: f64,
    pub w_t: f64,
    pub eps: f64,
    pub relax_step: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub patience: usize,
}

impl Default for MimConfig {
    fn default() -> Self {
        let spec = MaskSpec::default();
        Self {
            enabled: false,
            patch_size: 14,
            mask_ratio: 0.3,
            m_min: spec.m_min,
            m_max: spec.m_max,
            rho: spec.rho,
            w_t: spec.w_t,
            eps: spec.eps,
            relax_step: spec.relax_step,
            aspect_min: spec.aspect_min,
            aspect_max: spec.aspect_max,
            patience: spec.patience,
        }
    }
}

impl MimConfig {
    pub fn grid_side(&self, view_size: usize) -> usize {
        view_size.div_ceil(self.patch_size)
    }

    pub fn mask_spec(&self, tokens: usize) -> MaskSpec {
        MaskSpec {
            m: (self.mask_ratio * tokens as f64).round() as usize,
            m_min: self.m_min,
            m_max: self.m_max,
            rho: self.rho,
            w_t: self.w_t,
            eps: self.eps,
            relax_step: self.relax_step,
            aspect_min: self.aspect_min,
            aspect_max: self.aspect_max,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub d_max: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { d_max: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperatures: Temperatures,
    pub weights: LossWeights,
    pub center_momentum: f64,
    pub ema_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperatures: Temperatures::default(),
            weights: LossWeights::default(),
            center_momentum: 0.9,
            ema_momentum: 0.996,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub ordered: bool,
    /// Largest tolerated fraction of unreadable items.
    pub skip_tolerance: f64,
    /// Bound on in-flight results between workers and the writer.
    pub queue_capacity: usize,
    pub preprocess: PreprocessConfig,
    pub tissue: MaskParams,
    pub crop: CropSpec,
    pub mim: MimConfig,
    pub pairs: PairConfig,
    pub loss: LossConfig,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            ordered: false,
            skip_tolerance: 0.01,
            queue_capacity: 64,
            preprocess: PreprocessConfig::default(),
            tissue: MaskParams::default(),
            crop: CropSpec::default(),
            mim: MimConfig::default(),
            pairs: PairConfig::default(),
            loss: LossConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, "must lie in [0, 1]"))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, "must be positive and finite"))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(field, "must be at least 1"))
    }
}

impl PipelineConfig {
    /// Checks every field; the error names the first offending field path.
    pub fn validate(&self) -> Result<()> {
        at_least_one("workers", self.workers)?;
        unit("skip_tolerance", self.skip_tolerance)?;
        at_least_one("queue_capacity", self.queue_capacity)?;

        let c = &self.preprocess.clahe;
        if c.clip_limit.is_nan() || c.clip_limit <= 0.0 {
            return Err(Error::config("preprocess.clahe.clip_limit", "must be positive"));
        }
        at_least_one("preprocess.clahe.tiles_y", c.tiles_y)?;
        at_least_one("preprocess.clahe.tiles_x", c.tiles_x)?;

        if !(0.0..=100.0).contains(&self.tissue.tau) {
            return Err(Error::config("tissue.tau", "must lie in [0, 100]"));
        }
        if self.tissue.kernel.is_multiple_of(2) {
            return Err(Error::config("tissue.kernel", "must be odd"));
        }

        self.crop.validate("crop")?;

        let m = &self.mim;
        at_least_one("mim.patch_size", m.patch_size)?;
        unit("mim.mask_ratio", m.mask_ratio)?;
        at_least_one("mim.m_min", m.m_min)?;
        if m.m_max < m.m_min {
            return Err(Error::config("mim.m_max", "must be at least m_min"));
        }
        unit("mim.rho", m.rho)?;
        if !(m.w_t >= 0.0 && m.w_t.is_finite()) {
            return Err(Error::config("mim.w_t", "must be finite and non-negative"));
        }
        positive("mim.eps", m.eps)?;
        positive("mim.relax_step", m.relax_step)?;
        positive("mim.aspect_min", m.aspect_min)?;
        if !(m.aspect_max >= m.aspect_min && m.aspect_max.is_finite()) {
            return Err(Error::config(
                "mim.aspect_max",
                "must be finite and at least aspect_min",
            ));
        }
        at_least_one("mim.patience", m.patience)?;

        at_least_one("pairs.d_max", self.pairs.d_max)?;

        let l = &self.loss;
        positive("loss.temperatures.tau_s", l.temperatures.tau_s)?;
        positive("loss.temperatures.tau_t", l.temperatures.tau_t)?;
        for (name, w) in [
            ("dino_m", l.weights.dino_m),
            ("ibot_m", l.weights.ibot_m),
            ("dino_adj", l.weights.dino_adj),
            ("koleo", l.weights.koleo),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(
                    format!("loss.weights.{name}"),
                    "must be finite and non-negative",
                ));
            }
        }
        unit("loss.center_momentum", l.center_momentum)?;
        unit("loss.ema_momentum", l.ema_momentum)?;

        self.toy.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let span = e
                .span()
                .map(|s| format!(" at bytes {}..{}", s.start, s.end))
                .unwrap_or_default();
            Error::config("<toml>", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
