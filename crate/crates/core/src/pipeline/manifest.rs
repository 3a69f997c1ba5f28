//! Line-delimited JSON dataset manifests. Each non-blank line is
//! `{"id": ..., "kind": "image2d" | "volume", "path": ...}` with paths
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::probe_volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Image2d,
    Volume,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    kind: EntryKind,
    path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: EntryKind,
    /// Resolved against the manifest root.
    pub path: PathBuf,
    /// Probed slice count for volumes.
    pub slices: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Error::MissingManifest(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::ManifestSyntax {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        let resolved = root.join(&raw.path);
        if !resolved.exists() {
            return Err(Error::MissingEntryPath {
                id: raw.id,
                path: resolved,
            });
        }
        let slices = match raw.kind {
            EntryKind::Volume => Some(probe_volume(&resolved)?),
            EntryKind::Image2d => None,
        };
        entries.push(ManifestEntry {
            id: raw.id,
            kind: raw.kind,
            path: resolved,
            slices,
        });
    }
    if entries.is_empty() {
        log::warn!("manifest {} has no entries", path.display());
    }
    Ok(Manifest { root, entries })
}
