mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tissue_ssl::pipeline::{read_gray16, read_stream, read_volume_stack, write_pgm16};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tissue-ssl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(
        &p,
        "[crop]\nout_size_global = 32\nout_size_local = 16\nn_local = 2\n[mim]\npatch_size = 8\nm_min = 1\nm_max = 6\n",
    )
    .unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn sample_writes_batches_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(dir.path(), 2, 2, 0, 64);
    let cfg = small_config(dir.path());
    let o = run(
        &[
            "sample",
            fx.manifest.to_str().unwrap(),
            "--with-mim",
            "--ordered",
            "--workers",
            "3",
            "--config",
            &cfg,
            "--out",
            "b.bin",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(dir.path().join("b.bin")).unwrap();
    let records = read_stream(&mut bytes.as_slice()).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.token_masks.len() == 2));
    let sidecar = fs::read_to_string(dir.path().join("b.bin.provenance.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 4);
    // every stderr line is a JSON record
    for line in String::from_utf8(o.stderr).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("level").is_some() && v.get("msg").is_some());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(dir.path(), 2, 0, 1, 48);
    let m = fx.manifest.to_str().unwrap();
    let cfg = small_config(dir.path());

    assert_eq!(code(&run(&["ingest", "missing.jsonl"], dir.path())), 1);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    fs::write(dir.path().join("bad.toml"), "[crop]\nrho = 2.0\n").unwrap();
    let o = run(&["ingest", m, "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("crop.rho"));
    assert_eq!(code(&run(&["mask", m], dir.path())), 1, "mask without --out");

    // one of three items is corrupt: above the 1% default, within 50%
    assert_eq!(
        code(&run(&["sample", m, "--config", &cfg, "--out", "x.bin"], dir.path())),
        3
    );
    fs::write(
        dir.path().join("lenient.toml"),
        fs::read_to_string(&cfg)
            .unwrap()
            .replace("[crop]", "skip_tolerance = 0.5\n[crop]"),
    )
    .unwrap();
    assert_eq!(
        code(&run(
            &["sample", m, "--config", "lenient.toml", "--out", "x.bin"],
            dir.path()
        )),
        0
    );

    fs::write(dir.path().join("notimage.pgm"), b"garbage").unwrap();
    assert_eq!(code(&run(&["mask", "notimage.pgm", "--out", "m.pgm"], dir.path())), 2);
}

#[test]
fn ingest_lists_entries_and_packs_slices() {
    let dir = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(dir.path(), 1, 3, 0, 32);
    let o = run(&["ingest", fx.manifest.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    let entries: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[1]["slices"], 6);
    assert_eq!(entries[3]["slices"], 6);

    // vol002 is the slice-directory volume
    let o = run(&["ingest", "vol002", "--out", "packed.mdvo"], dir.path());
    assert_eq!(code(&o), 0);
    let packed = read_volume_stack(&dir.path().join("packed.mdvo")).unwrap();
    assert_eq!(packed.len(), 6);
    assert_eq!(packed[0], read_gray16(&dir.path().join("vol002/s00.pgm")).unwrap());
}

#[test]
fn mask_writes_binary_pgm_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fixture(dir.path(), 1, 0, 0, 64);
    let o = run(&["mask", "img000.pgm", "--out", "m.pgm"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let frac = stats["tissue_fraction"].as_f64().unwrap();
    assert!((0.2..0.5).contains(&frac), "{frac}");
    let m = read_gray16(&dir.path().join("m.pgm")).unwrap();
    assert!(m.pixels().iter().all(|&v| v == 0 || v == 65535));
    let ones = m.pixels().iter().filter(|&&v| v > 0).count();
    assert!((ones as f64 / m.pixels().len() as f64 - frac).abs() < 1e-12);
}

#[test]
fn pairs_prints_valid_triples() {
    let dir = tempfile::tempdir().unwrap();
    let slices = (0..8).map(|k| tissue_ssl::preprocess::RasterImage16::filled(4, 4, k).unwrap());
    fs::create_dir(dir.path().join("v")).unwrap();
    for (k, s) in slices.enumerate() {
        write_pgm16(&dir.path().join(format!("v/{k}.pgm")), &s).unwrap();
    }
    let o = run(&["pairs", "v", "--count", "200", "--seed", "4"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 200);
    for line in text.lines() {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        let (k, kp, d) = (
            p["k"].as_u64().unwrap(),
            p["k_prime"].as_u64().unwrap(),
            p["d"].as_u64().unwrap(),
        );
        assert!(k < 8 && kp < 8 && (1..=4).contains(&d) && k.abs_diff(kp) == d);
    }
    let again = run(&["pairs", "v", "--count", "200", "--seed", "4"], dir.path());
    assert_eq!(again.stdout, text.into_bytes());
}

#[test]
fn toy_train_and_selftest_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["toy-train", "--steps", "3", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["step"], 3);
    assert!(lines[0]["total"].as_f64().unwrap().is_finite());

    let o = run(&["selftest"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn bench_on_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = run(&["bench", "empty.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["stages"].as_array().unwrap().len(), 3);
    assert_eq!(r["stages"][0]["items_per_sec"], 0.0);
}
