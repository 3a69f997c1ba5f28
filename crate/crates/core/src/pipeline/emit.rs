//! Multi-worker batch production.
//!
//! Workers pull item indices from a bounded job queue and push finished
//! records onto a bounded result queue; the calling thread is the only
//! writer. Every item draws from `item_rng(seed, index)`, so a record
//! depends on nothing but the seed, the config and the item itself.

use std::collections::BTreeMap;
use std::io::Write;
use std::thread;

use crossbeam_channel::bounded;
use serde::Serialize;

use super::batch::{BatchRecord, PairRecord};
use super::config::PipelineConfig;
use super::io::{read_gray16, read_volume};
use super::manifest::{EntryKind, Manifest, ManifestEntry};
use crate::crop_sampler::{sample_view_sets, CropWindow, View};
use crate::dbt_pairs::{make_pair_views, sample_slice_pair, DbtVolume};
use crate::error::{Error, Result};
use crate::mim_masker::{sample_block_mask, view_token_coverage, TokenMask};
use crate::preprocess::{preprocess, NormalizedImage};
use crate::rng::item_rng;
use crate::tissue_mask::{build_mask, CoverageIndex};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EmitSummary {
    pub items: usize,
    pub emitted: usize,
    pub skipped: usize,
    pub bytes: u64,
}

fn token_masks<R: rand::Rng + ?Sized>(
    views: &[View],
    index: &CoverageIndex,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<Vec<TokenMask>> {
    if !cfg.mim.enabled {
        return Ok(Vec::new());
    }
    views
        .iter()
        .map(|v| {
            let side = cfg.mim.grid_side(v.size);
            let cov = view_token_coverage(index, &v.crop.window, side, side)?;
            sample_block_mask(&cov, &cfg.mim.mask_spec(side * side), rng)
        })
        .collect()
}

fn views_record<R: rand::Rng + ?Sized>(
    index_in_manifest: u64,
    id: &str,
    img: &NormalizedImage,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<BatchRecord> {
    let mask = build_mask(img, &cfg.tissue)?;
    let index = mask.coverage_index();
    let set = sample_view_sets(img, &index, &cfg.crop, rng)?;
    let token_masks = token_masks(&set.teacher_views, &index, cfg, rng)?;
    Ok(BatchRecord {
        item_index: index_in_manifest,
        item_id: id.to_owned(),
        teacher_views: set.teacher_views,
        student_views: set.student_views,
        token_masks,
        pair: None,
    })
}

/// Builds the record for manifest item `index`.
///
/// Volumes draw a slice pair first; the view sets come from slice `k` and
/// the pair views from `(k, k')`. A one-slice volume yields views without a
/// pair.
pub fn build_record(entry: &ManifestEntry, index: usize, cfg: &PipelineConfig) -> Result<BatchRecord> {
    let mut rng = item_rng(cfg.seed, index as u64);
    let clahe = cfg.preprocess.clahe_params();
    match entry.kind {
        EntryKind::Image2d => {
            let img = preprocess(&read_gray16(&entry.path)?, clahe)?;
            views_record(index as u64, &entry.id, &img, cfg, &mut rng)
        }
        EntryKind::Volume => {
            let slices = read_volume(&entry.path)?
                .iter()
                .map(|s| preprocess(s, clahe))
                .collect::<Result<Vec<_>>>()?;
            let vol = DbtVolume::new(entry.id.clone(), slices)?;
            if vol.len() < 2 {
                return views_record(index as u64, &entry.id, vol.slice(0), cfg, &mut rng);
            }
            let pair = sample_slice_pair(&vol, cfg.pairs.d_max, &mut rng)?;
            let mut record = views_record(index as u64, &entry.id, vol.slice(pair.k), cfg, &mut rng)?;
            let views = make_pair_views(&vol, &pair, &cfg.tissue, &cfg.crop, &mut rng)?;
            record.pair = Some(PairRecord {
                volume_id: vol.volume_id().to_owned(),
                pair,
                views,
            });
            Ok(record)
        }
    }
}

#[derive(Serialize)]
struct ViewProvenance<'a> {
    role: &'a str,
    view: usize,
    size: usize,
    #[serde(flatten)]
    crop: CropWindow,
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    item_index: u64,
    item_id: &'a str,
    views: Vec<ViewProvenance<'a>>,
}

/// One JSON line naming every view's window, coverage and relaxed flag.
pub fn provenance_line(rec: &BatchRecord) -> Result<String> {
    let mut views = Vec::new();
    let groups: [(&str, Vec<&View>); 3] = [
        ("teacher", rec.teacher_views.iter().collect()),
        ("student", rec.student_views.iter().collect()),
        (
            "pair",
            rec.pair
                .iter()
                .flat_map(|p| [&p.views.view_a, &p.views.view_b])
                .collect(),
        ),
    ];
    for (role, group) in groups {
        for (i, v) in group.into_iter().enumerate() {
            views.push(ViewProvenance {
                role,
                view: i,
                size: v.size,
                crop: v.crop,
            });
        }
    }
    let line = ProvenanceLine {
        item_index: rec.item_index,
        item_id: &rec.item_id,
        views,
    };
    serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))
}

struct Writer<'a, 'b, W: Write> {
    sink: &'a mut W,
    provenance: Option<&'b mut dyn Write>,
    summary: EmitSummary,
}

impl<W: Write> Writer<'_, '_, W> {
    fn accept(&mut self, index: usize, result: Result<BatchRecord>, id: &str) -> Result<()> {
        match result {
            Ok(rec) => {
                self.summary.bytes += rec.write_to(self.sink)? as u64;
                if let Some(p) = self.provenance.as_deref_mut() {
                    writeln!(p, "{}", provenance_line(&rec)?)?;
                }
                self.summary.emitted += 1;
            }
            Err(e) => {
                log::warn!("skipping item {index} ({id}): {e}");
                self.summary.skipped += 1;
            }
        }
        Ok(())
    }
}

/// Streams one record per readable manifest item into `sink`.
///
/// With `cfg.ordered` records appear in manifest order; otherwise in
/// completion order. Unreadable items are logged and skipped; if the
/// skipped fraction ends above `cfg.skip_tolerance` the call fails with
/// [`Error::SkipToleranceExceeded`] after writing everything else.
pub fn emit_batches<W: Write>(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    sink: &mut W,
    provenance: Option<&mut dyn Write>,
) -> Result<EmitSummary> {
    cfg.validate()?;
    let total = manifest.len();
    let mut writer = Writer {
        sink,
        provenance,
        summary: EmitSummary {
            items: total,
            ..EmitSummary::default()
        },
    };
    let workers = cfg.workers.min(total.max(1));
    let (job_tx, job_rx) = bounded::<usize>(cfg.queue_capacity);
    let (res_tx, res_rx) = bounded::<(usize, Result<BatchRecord>)>(cfg.queue_capacity);

    thread::scope(|s| -> Result<()> {
        s.spawn(move || {
            for i in 0..total {
                if job_tx.send(i).is_err() {
                    break;
                }
            }
        });
        for _ in 0..workers {
            let (job_rx, res_tx) = (job_rx.clone(), res_tx.clone());
            s.spawn(move || {
                for i in job_rx {
                    let rec = build_record(&manifest.entries[i], i, cfg);
                    if res_tx.send((i, rec)).is_err() {
                        break;
                    }
                }
            });
        }
        drop((job_rx, res_tx));

        // early returns drop `res_rx`, which unblocks and stops the workers
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, rec) in res_rx {
            if !cfg.ordered {
                writer.accept(i, rec, &manifest.entries[i].id)?;
                continue;
            }
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&next) {
                writer.accept(next, rec, &manifest.entries[next].id)?;
                next += 1;
            }
        }
        Ok(())
    })?;

    writer.sink.flush()?;
    if let Some(p) = writer.provenance.as_deref_mut() {
        p.flush()?;
    }
    let summary = writer.summary;
    if summary.skipped as f64 > cfg.skip_tolerance * total as f64 {
        return Err(Error::SkipToleranceExceeded {
            skipped: summary.skipped,
            total,
            tolerance: cfg.skip_tolerance,
        });
    }
    Ok(summary)
}
