//! Per-stage throughput over a manifest: tissue-mask building, crop
//! sampling and token masking, each timed separately.
//!
//! Every 2D image and every volume slice is one bench image. Loading and
//! preprocessing happen once, untimed.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use super::io::{read_gray16, read_volume};
use super::manifest::{EntryKind, Manifest};
use crate::crop_sampler::{sample_view_sets, ViewSet};
use crate::error::{Error, Result};
use crate::mim_masker::{sample_block_mask, view_token_coverage};
use crate::preprocess::{preprocess, NormalizedImage};
use crate::rng::item_rng;
use crate::tissue_mask::{build_mask, CoverageIndex};

pub const BENCH_REPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub items: usize,
    pub views: usize,
    pub median_secs: f64,
    pub items_per_sec: f64,
    pub views_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub workers: usize,
    pub reps: usize,
    pub images: usize,
    pub stages: Vec<StageReport>,
}

fn rate(n: usize, secs: f64) -> f64 {
    if n == 0 || secs <= 0.0 {
        0.0
    } else {
        n as f64 / secs
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Runs `f` [`BENCH_REPS`] times and keeps the median wall time along with
/// the output of the last run.
fn timed<T>(mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut secs = Vec::with_capacity(BENCH_REPS);
    let mut last = None;
    for _ in 0..BENCH_REPS {
        let t0 = Instant::now();
        let out = f()?;
        secs.push(t0.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((median(secs), last.expect("at least one repetition")))
}

fn stage(name: &str, items: usize, views: usize, secs: f64) -> StageReport {
    StageReport {
        stage: name.into(),
        items,
        views,
        median_secs: secs,
        items_per_sec: rate(items, secs),
        views_per_sec: rate(views, secs),
    }
}

fn load_images(manifest: &Manifest, cfg: &PipelineConfig) -> Result<Vec<NormalizedImage>> {
    let clahe = cfg.preprocess.clahe_params();
    let mut images = Vec::new();
    for entry in &manifest.entries {
        let raw = match entry.kind {
            EntryKind::Image2d => vec![read_gray16(&entry.path)?],
            EntryKind::Volume => read_volume(&entry.path)?,
        };
        for r in &raw {
            images.push(preprocess(r, clahe)?);
        }
    }
    Ok(images)
}

pub fn run_bench(manifest: &Manifest, cfg: &PipelineConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let images = load_images(manifest, cfg)?;
    let n = images.len();

    let (mask_secs, indices) = timed(|| {
        pool.install(|| {
            images
                .par_iter()
                .map(|img| build_mask(img, &cfg.tissue).map(|m| m.coverage_index()))
                .collect::<Result<Vec<CoverageIndex>>>()
        })
    })?;

    let (crop_secs, view_sets) = timed(|| {
        pool.install(|| {
            images
                .par_iter()
                .zip(&indices)
                .enumerate()
                .map(|(i, (img, idx))| sample_view_sets(img, idx, &cfg.crop, &mut item_rng(cfg.seed, i as u64)))
                .collect::<Result<Vec<ViewSet>>>()
        })
    })?;
    let crop_views: usize = view_sets
        .iter()
        .map(|s| s.teacher_views.len() + s.student_views.len())
        .sum();

    let (mim_secs, mim_views) = timed(|| {
        pool.install(|| {
            view_sets
                .par_iter()
                .zip(&indices)
                .enumerate()
                .map(|(i, (set, idx))| {
                    let mut rng = item_rng(cfg.seed ^ 0x4d49_4d00, i as u64);
                    for v in &set.teacher_views {
                        let side = cfg.mim.grid_side(v.size);
                        let cov = view_token_coverage(idx, &v.crop.window, side, side)?;
                        sample_block_mask(&cov, &cfg.mim.mask_spec(side * side), &mut rng)?;
                    }
                    Ok(set.teacher_views.len())
                })
                .collect::<Result<Vec<usize>>>()
                .map(|c| c.into_iter().sum::<usize>())
        })
    })?;

    Ok(BenchReport {
        workers: cfg.workers,
        reps: BENCH_REPS,
        images: n,
        stages: vec![
            stage("mask_build", n, n, mask_secs),
            stage("crop_sample", n, crop_views, crop_secs),
            stage("mim_mask", n, mim_views, mim_secs),
        ],
    })
}
