//! Manifests, file formats, configuration and the batch-producing driver.

pub mod batch;
pub mod bench;
pub mod config;
pub mod emit;
pub mod io;
pub mod manifest;

pub use batch::{read_stream, BatchHeader, BatchRecord, PairRecord};
pub use bench::{run_bench, BenchReport, StageReport};
pub use config::{LossConfig, MimConfig, PairConfig, PipelineConfig, PreprocessConfig};
pub use emit::{build_record, emit_batches, provenance_line, EmitSummary};
pub use io::{read_gray16, read_volume, read_volume_stack, write_pgm16, write_pgm8, write_volume_stack};
pub use manifest::{load_manifest, EntryKind, Manifest, ManifestEntry};
