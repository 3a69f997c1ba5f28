use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("window ({x},{y},{w}x{h}) out of bounds for {width}x{height} image")]
    WindowOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("window has zero area")]
    EmptyWindow,
    #[error("mask contains no tissue pixels")]
    NoTissue,
    #[error("infeasible crop scale: {0}")]
    InfeasibleScale(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask budget {m} exceeds grid size {grid}")]
    MaskBudgetTooLarge { m: usize, grid: usize },
    #[error("invalid mask spec: {0}")]
    InvalidMaskSpec(String),
    #[error("volume has a single slice; pairs need at least two")]
    SingleSliceVolume,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty view set")]
    EmptyViewSet,
    #[error("empty token mask")]
    EmptyMask,
    #[error("token index ({row},{col}) outside {rows}x{cols} grid")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("koleo needs at least two feature vectors")]
    NeedTwoPoints,
    #[error("empty batch")]
    EmptyBatch,
    #[error("manifest file not found: {0}")]
    MissingManifest(PathBuf),
    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),
    #[error("manifest entry `{id}` points at missing path {path}")]
    MissingEntryPath { id: String, path: PathBuf },
    #[error("manifest line {line}: {msg}")]
    ManifestSyntax { line: usize, msg: String },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("skipped {skipped} of {total} items, above tolerance {tolerance}")]
    SkipToleranceExceeded {
        skipped: usize,
        total: usize,
        tolerance: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
