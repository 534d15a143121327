//! Command-level contracts: flags, exit codes, file formats, and the
//! pipeline identities that only show up end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use doctr_core::fields::{load_bmap, warp_image};
use doctr_core::image::load_ppm;

fn doctr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doctr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = doctr(args);
    assert!(
        out.status.success(),
        "doctr {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("doctr_cli_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_count_zero_writes_empty_manifest() {
    let dir = scratch("synth0");
    ok(&["synth", "--count", "0", "--seed", "1", "--out", &s(&dir.join("ds"))]);
    let manifest = std::fs::read_to_string(dir.join("ds/manifest.tsv")).unwrap();
    assert!(manifest.is_empty());
}

#[test]
fn synth_eight_samples_within_budget() {
    let dir = scratch("synth8");
    let started = Instant::now();
    ok(&["synth", "--count", "8", "--seed", "2", "--out", &s(&dir.join("ds"))]);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "synth of 8 samples took {elapsed:.1}s");
    let manifest = std::fs::read_to_string(dir.join("ds/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
}

#[test]
fn usage_errors_exit_one_data_errors_exit_two() {
    let out = doctr(&["synth", "--count", "not-a-number", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = doctr(&["rectify", "--input", "/nonexistent.ppm", "--geo", "/nonexistent.dtrc",
        "--out", "/tmp/x.ppm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rectify_skip_ill_dump_bmap_and_resolution() {
    let dir = scratch("rect");
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "2", "--seed", "5", "--out", &ds]);
    // no-preprocess checkpoint: the rectified image is the warp of the raw
    // input, so a re-applied BMAP dump must reproduce it exactly
    let run = s(&dir.join("run"));
    ok(&["train-geo", "--data", &ds, "--out", &run, "--profile", "micro",
        "--steps", "30", "--seed", "5", "--no-preprocess"]);
    let geo = format!("{run}/geo.dtrc");
    let input = format!("{ds}/000000.img.ppm");
    let out_plain = s(&dir.join("plain.ppm"));
    let out_skip = s(&dir.join("skip.ppm"));
    let bmap_path = s(&dir.join("map.bmap"));
    ok(&["rectify", "--input", &input, "--geo", &geo, "--out", &out_plain,
        "--dump-bmap", &bmap_path]);
    ok(&["rectify", "--input", &input, "--geo", &geo, "--out", &out_skip, "--skip-ill"]);
    // --skip-ill without an --ill checkpoint is the same geometric output
    assert_eq!(
        std::fs::read(&out_plain).unwrap(),
        std::fs::read(&out_skip).unwrap()
    );
    // output resolution equals input resolution
    let src = load_ppm(&input).unwrap();
    let rectified = load_ppm(&out_plain).unwrap();
    assert_eq!(rectified.height(), src.height());
    assert_eq!(rectified.width(), src.width());
    // re-applying the dumped map to the input reproduces the output
    let map = load_bmap(&bmap_path).unwrap();
    assert_eq!(map.height(), src.height());
    let rewarped = warp_image(&src, &map).unwrap();
    let max_dq = rewarped
        .data()
        .iter()
        .zip(rectified.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    // the written image is 8-bit quantized; re-application matches within
    // one quantization step
    assert!(max_dq <= 0.5 / 255.0 + 1e-6, "re-applied map differs by {max_dq}");
}

#[test]
fn train_geo_resume_reproduces_next_step_loss() {
    let dir = scratch("resume");
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "2", "--seed", "8", "--out", &ds]);
    let full = s(&dir.join("full"));
    ok(&["train-geo", "--data", &ds, "--out", &full, "--profile", "micro",
        "--steps", "4", "--seed", "9"]);
    let short = s(&dir.join("short"));
    ok(&["train-geo", "--data", &ds, "--out", &short, "--profile", "micro",
        "--steps", "3", "--seed", "9"]);
    let resumed = s(&dir.join("resumed"));
    ok(&["train-geo", "--data", &ds, "--out", &resumed, "--profile", "micro",
        "--steps", "4", "--seed", "9", "--resume", &format!("{short}/geo.dtrc")]);
    let full_log = std::fs::read_to_string(dir.join("full/loss.tsv")).unwrap();
    let resumed_log = std::fs::read_to_string(dir.join("resumed/loss.tsv")).unwrap();
    let full_step4 = full_log.lines().nth(3).unwrap();
    let resumed_step4 = resumed_log.lines().next().unwrap();
    assert_eq!(full_step4, resumed_step4, "resumed next-step loss differs");
}

#[test]
fn evaluate_identical_dirs_and_aggregates() {
    let dir = scratch("eval");
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "2", "--seed", "11", "--out", &ds]);
    let pred = dir.join("pred");
    let gt = dir.join("gt");
    let text = dir.join("text");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&text).unwrap();
    for i in 0..2 {
        let name = format!("{i:06}.ppm");
        std::fs::copy(dir.join(format!("ds/{i:06}.clean.ppm")), pred.join(&name)).unwrap();
        std::fs::copy(dir.join(format!("ds/{i:06}.clean.ppm")), gt.join(&name)).unwrap();
        std::fs::copy(
            dir.join(format!("ds/{i:06}.txt")),
            text.join(format!("{i:06}.txt")),
        )
        .unwrap();
    }
    let out = dir.join("report");
    ok(&["evaluate", "--pred", &s(&pred), "--gt", &s(&gt), "--text", &s(&text),
        "--out", &s(&out)]);
    let report = std::fs::read_to_string(out.join("report.tsv")).unwrap();
    let get = |key: &str| -> f64 {
        report
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key} in report"))
            .split('\t')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("mean.ld"), 0.0);
    assert!((get("mean.ms-ssim") - 1.0).abs() < 1e-9);
    assert_eq!(get("mean.cer"), 0.0);
    assert_eq!(get("mean.ed"), 0.0);
    // aggregate equals the hand average of per-image lines
    let vals: Vec<f64> = report
        .lines()
        .filter(|l| l.contains(".ms-ssim") && !l.starts_with("mean"))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 2);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((get("mean.ms-ssim") - mean).abs() < 1e-9);
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("count=2"));
    assert!(summary.contains("ld_mean="));
}

#[test]
fn evaluate_unmatched_files_listed_nonzero_exit() {
    let dir = scratch("eval_mismatch");
    let pred = dir.join("pred");
    let gt = dir.join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "1", "--seed", "12", "--out", &ds]);
    std::fs::copy(dir.join("ds/000000.clean.ppm"), pred.join("only_pred.ppm")).unwrap();
    std::fs::copy(dir.join("ds/000000.clean.ppm"), gt.join("only_gt.ppm")).unwrap();
    let out = doctr(&["evaluate", "--pred", &s(&pred), "--gt", &s(&gt), "--out",
        &s(&dir.join("rep"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("only_pred.ppm") && err.contains("only_gt.ppm"),
        "unmatched files not listed: {err}");
}

#[test]
fn config_file_overrides_profile_and_flags_override_file() {
    let dir = scratch("cfg");
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "1", "--seed", "13", "--out", &ds]);
    let cfg = dir.join("train.cfg");
    std::fs::write(&cfg, "steps=7\nbatch=1\n").unwrap();
    let out_dir = dir.join("run");
    ok(&["train-geo", "--data", &ds, "--out", &s(&out_dir), "--profile", "micro",
        "--seed", "14", "--config", &s(&cfg), "--batch", "2"]);
    let echo = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echo.contains("steps=7"), "file override lost: {echo}");
    assert!(echo.contains("batch=2"), "flag override lost: {echo}");
    let log = std::fs::read_to_string(out_dir.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = scratch("badcfg");
    let ds = s(&dir.join("ds"));
    ok(&["synth", "--count", "1", "--seed", "15", "--out", &ds]);
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "stepss=7\n").unwrap();
    let out = doctr(&["train-geo", "--data", &ds, "--out", &s(&dir.join("run")),
        "--profile", "micro", "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepss"));
}
