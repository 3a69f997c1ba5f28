use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tissue_ssl::dbt_pairs::sample_slice_pair_in;
use tissue_ssl::pipeline::io::{probe_volume, slice_files};
use tissue_ssl::pipeline::{
    emit_batches, load_manifest, read_gray16, read_volume, run_bench, write_pgm8, write_volume_stack, PipelineConfig,
};
use tissue_ssl::preprocess::{preprocess, RasterImage8};
use tissue_ssl::rng::item_rng;
use tissue_ssl::selftest::run_selftest;
use tissue_ssl::tissue_mask::build_mask;
use tissue_ssl::toy_trainer::run_toy_training_to;
use tissue_ssl::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SKIPS: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tissue-ssl",
    version,
    about = "Tissue-aware view, mask and slice-pair sampling for mammography"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration; absent fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Emit records in manifest order.
    #[arg(long, global = true)]
    ordered: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and print one JSON line per entry, or pack a
    /// directory of slice images into a volume stack file (`--out`).
    Ingest { path: PathBuf },
    /// Build the tissue mask of one image; writes a 0/255 PGM to `--out`.
    Mask { image: PathBuf },
    /// Emit binary batch records for a manifest.
    Sample {
        manifest: PathBuf,
        /// Also draw token masks on teacher views.
        #[arg(long)]
        with_mim: bool,
        /// Provenance sidecar path; defaults to `<out>.provenance.jsonl`.
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
    /// Print sampled slice pairs of a volume as JSON lines.
    Pairs {
        volume: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Per-stage throughput report.
    Bench { manifest: PathBuf },
    /// Train the toy encoder on phantoms; one JSON metrics line per step.
    ToyTrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the loss fixture and gradient-check suite.
    Selftest,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.toy.seed = seed;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.ordered |= g.ordered;
    cfg.validate()?;
    Ok(cfg)
}

/// `--out` if given, standard output otherwise.
fn output(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn required_out(g: &GlobalArgs, what: &str) -> anyhow::Result<PathBuf> {
    match &g.out {
        Some(p) => Ok(p.clone()),
        None => Err(Error::InvalidArgument(format!("{what} needs --out")).into()),
    }
}

fn ingest(path: &Path, g: &GlobalArgs) -> anyhow::Result<()> {
    if path.is_dir() {
        let out = required_out(g, "packing a slice directory")?;
        let slices = read_volume(path)?;
        write_volume_stack(&out, &slices)?;
        log::info!(
            "packed {} slices from {} into {}",
            slices.len(),
            path.display(),
            out.display()
        );
        return Ok(());
    }
    let manifest = load_manifest(path)?;
    let mut w = output(g.out.as_deref())?;
    for e in &manifest.entries {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    log::info!("manifest {} holds {} entries", path.display(), manifest.len());
    Ok(())
}

fn mask(image: &Path, cfg: &PipelineConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    let out = required_out(g, "mask")?;
    let img = preprocess(&read_gray16(image)?, cfg.preprocess.clahe_params())?;
    let mask = build_mask(&img, &cfg.tissue)?;
    let px = mask.mask().bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm8(&out, &RasterImage8::new(mask.height(), mask.width(), px)?)?;
    let stats = json!({
        "height": mask.height(),
        "width": mask.width(),
        "tissue_fraction": mask.tissue_fraction(),
        "tau_used": mask.tau_used(),
        "theta": mask.theta(),
    });
    println!("{stats}");
    Ok(())
}

fn sample(
    manifest: &Path,
    with_mim: bool,
    provenance: Option<&Path>,
    cfg: &mut PipelineConfig,
    g: &GlobalArgs,
) -> anyhow::Result<()> {
    cfg.mim.enabled |= with_mim;
    let manifest = load_manifest(manifest)?;
    let sidecar = match (provenance, &g.out) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(out)) => {
            let mut name = out.as_os_str().to_owned();
            name.push(".provenance.jsonl");
            Some(PathBuf::from(name))
        }
        (None, None) => None,
    };
    let mut sink = output(g.out.as_deref())?;
    let mut side = match &sidecar {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let summary = emit_batches(&manifest, cfg, &mut sink, side.as_mut().map(|w| w as &mut dyn Write))?;
    log::info!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn pairs(volume: &Path, count: usize, cfg: &PipelineConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    let slices = if volume.is_dir() {
        slice_files(volume)?.len()
    } else {
        probe_volume(volume)?
    };
    let mut w = output(g.out.as_deref())?;
    let mut rng = item_rng(cfg.seed, 0);
    for _ in 0..count {
        let p = sample_slice_pair_in(slices, cfg.pairs.d_max, &mut rng)?;
        writeln!(w, "{}", serde_json::to_string(&p)?)?;
    }
    w.flush()?;
    Ok(())
}

fn bench(manifest: &Path, cfg: &PipelineConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    let report = run_bench(&load_manifest(manifest)?, cfg)?;
    let mut w = output(g.out.as_deref())?;
    writeln!(w, "{}", serde_json::to_string(&report)?)?;
    w.flush()?;
    Ok(())
}

fn toy_train(steps: Option<usize>, cfg: &mut PipelineConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    if let Some(s) = steps {
        cfg.toy.steps = s;
    }
    let mut w = output(g.out.as_deref())?;
    let trace = run_toy_training_to(&cfg.toy, &mut w)?;
    w.flush()?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        log::info!(
            "toy training: total loss {:.4} -> {:.4} over {} steps",
            first.total,
            last.total,
            trace.len()
        );
    }
    Ok(())
}

fn selftest(cfg: &PipelineConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    let checks = run_selftest(cfg.seed)?;
    let mut w = output(g.out.as_deref())?;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        writeln!(
            w,
            "{verdict} {:<40} worst={:.3e} tol={:.0e}",
            c.name, c.worst, c.tolerance
        )?;
    }
    w.flush()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} selftest properties failed", checks.len());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    match &cli.command {
        Command::Ingest { path } => ingest(path, g),
        Command::Mask { image } => mask(image, &cfg, g),
        Command::Sample {
            manifest,
            with_mim,
            provenance,
        } => sample(manifest, *with_mim, provenance.as_deref(), &mut cfg, g),
        Command::Pairs { volume, count } => pairs(volume, *count, &cfg, g),
        Command::Bench { manifest } => bench(manifest, &cfg, g),
        Command::ToyTrain { steps } => toy_train(*steps, &mut cfg, g),
        Command::Selftest => selftest(&cfg, g),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::SkipToleranceExceeded { .. }) => EXIT_SKIPS,
        Some(
            Error::Config { .. }
            | Error::InvalidArgument(_)
            | Error::MissingManifest(_)
            | Error::DuplicateId(_)
            | Error::MissingEntryPath { .. }
            | Error::ManifestSyntax { .. },
        ) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
