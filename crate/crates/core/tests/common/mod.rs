//! On-disk fixtures built from seeded phantoms.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use tissue_ssl::pipeline::{write_pgm16, write_volume_stack};
use tissue_ssl::preprocess::{NormalizedImage, RasterImage16};
use tissue_ssl::rng::item_rng;
use tissue_ssl::toy_trainer::{generate_phantom, PhantomSpec};

pub fn to_raster16(img: &NormalizedImage) -> RasterImage16 {
    let px = img.values().iter().map(|v| (v * 65535.0).round() as u16).collect();
    RasterImage16::new(img.height(), img.width(), px).unwrap()
}

pub struct Fixture {
    pub manifest: PathBuf,
    pub lines: Vec<String>,
}

/// Writes `images` 2D phantoms as PGM and `volumes` phantom stacks, every
/// third volume as a slice directory, plus `corrupt` unreadable images.
pub fn write_fixture(dir: &Path, images: usize, volumes: usize, corrupt: usize, size: usize) -> Fixture {
    let spec = PhantomSpec {
        size,
        slices: 6,
        ..PhantomSpec::default()
    };
    let mut rng = item_rng(99, 0);
    let mut lines = Vec::new();
    for i in 0..images {
        let p = generate_phantom(&spec, &mut rng).unwrap();
        let name = format!("img{i:03}.pgm");
        write_pgm16(&dir.join(&name), &to_raster16(&p.image)).unwrap();
        lines.push(format!(r#"{{"id":"img{i}","kind":"image2d","path":"{name}"}}"#));
    }
    for v in 0..volumes {
        let p = generate_phantom(&spec, &mut rng).unwrap();
        let slices: Vec<_> = p.volume.slices().iter().map(to_raster16).collect();
        let name = if v % 3 == 2 {
            let d = format!("vol{v:03}");
            fs::create_dir(dir.join(&d)).unwrap();
            for (k, s) in slices.iter().enumerate() {
                write_pgm16(&dir.join(&d).join(format!("s{k:02}.pgm")), s).unwrap();
            }
            d
        } else {
            let f = format!("vol{v:03}.mdvo");
            write_volume_stack(&dir.join(&f), &slices).unwrap();
            f
        };
        lines.push(format!(r#"{{"id":"vol{v}","kind":"volume","path":"{name}"}}"#));
    }
    for c in 0..corrupt {
        let name = format!("bad{c}.pgm");
        fs::write(dir.join(&name), b"P5\n8 8\n65535\ntruncated").unwrap();
        lines.push(format!(r#"{{"id":"bad{c}","kind":"image2d","path":"{name}"}}"#));
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    Fixture { manifest, lines }
}
