//! The command-line tool end to end: data generation, training, erasing and
//! evaluation on a synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::Command;

use text_eraser::metrics::list_images;
use text_eraser::trainer::read_log;

use super::DESK_OVERRIDES;

/// Runs the `text-eraser` binary and returns its exit code.
pub fn tool(args: &[&str], sets: &[&str]) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_text-eraser"));
    cmd.args(args).env("RUST_LOG", "warn");
    for s in sets {
        cmd.args(["--set", s]);
    }
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn names(dir: &Path) -> Vec<String> {
    list_images(dir).unwrap().iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
}

/// Mean row of a `metrics.csv` as `(psnr, mssim)`.
pub fn mean_row(report_dir: &Path) -> (f64, f64) {
    let text = std::fs::read_to_string(report_dir.join("metrics.csv")).unwrap();
    let row = text.lines().find(|l| l.starts_with("mean,")).expect("mean row");
    let f: Vec<&str> = row.split(',').collect();
    let psnr = if f[1] == "inf" { f64::INFINITY } else { f[1].parse().unwrap() };
    (psnr, f[2].parse().unwrap())
}

pub fn make_data(out: &Path, samples: usize, seed: u64) {
    let n = format!("data.samples={samples}");
    assert_eq!(tool(&["make-data", "--out", s(out), "--seed", &seed.to_string()], &[&n]), 0);
}

/// Trains on `data` for `epochs` with the desk-scale loss network widths
/// plus `extra` overrides and returns the checkpoint path.
pub fn train(data: &Path, run: &Path, epochs: usize, extra: &[&str]) -> PathBuf {
    let e = format!("train.epochs={epochs}");
    let mut sets: Vec<&str> = DESK_OVERRIDES.to_vec();
    sets.extend_from_slice(extra);
    sets.push(&e);
    assert_eq!(tool(&["train", "--in", s(data), "--out", s(run)], &sets), 0);
    run.join("last.ckpt")
}

pub fn erase(input: &Path, out: &Path, ckpt: &Path) {
    assert_eq!(tool(&["erase", "--in", s(input), "--out", s(out), "--ckpt", s(ckpt)], &[]), 0);
}

pub fn eval(pred: &Path, gt: &Path, out: &Path) -> (f64, f64) {
    assert_eq!(tool(&["eval", "--in", s(pred), "--gt", s(gt), "--out", s(out)], &[]), 0);
    mean_row(out)
}

/// make-data(32), two training epochs, erase and eval.
pub fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, erased, report) =
        (dir.path().join("data"), dir.path().join("run"), dir.path().join("erased"), dir.path().join("report"));
    make_data(&data, 32, 1);
    assert_eq!(names(&data.join("image")).len(), 32);
    let ckpt = train(&data, &run, 2, &[]);
    assert!(ckpt.is_file());
    assert!(run.join("manifest.json").is_file());
    // 32 samples in batches of four: 8 steps per epoch.
    assert_eq!(read_log(&run.join("losses.jsonl")).unwrap().len(), 16);
    erase(&data.join("image"), &erased, &ckpt);
    assert_eq!(names(&erased), names(&data.join("image")));
    let (psnr, mssim) = eval(&erased, &data.join("label"), &report);
    assert!(psnr.is_finite() && psnr > 0.0);
    assert!((0.0..=1.0).contains(&mssim));
    let csv = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 34);
    assert!(report.join("summary.txt").is_file());
}

pub fn eval_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&data, 4, 3);
    let report = dir.path().join("report");
    let (psnr, mssim) = eval(&data.join("label"), &data.join("label"), &report);
    assert_eq!(psnr, f64::INFINITY);
    assert_eq!(mssim, 1.0);
    let csv = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    let mean = csv.lines().last().unwrap();
    assert!(mean.ends_with(",0.000000,0.00000000,0.00000000"), "{mean}");
}

pub fn make_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    make_data(&a, 3, 9);
    make_data(&b, 3, 9);
    for sub in ["image", "label", "mask", "annotation"] {
        for entry in std::fs::read_dir(a.join(sub)).unwrap() {
            let p = entry.unwrap().path();
            let q = b.join(sub).join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
        }
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("smoke_pipeline", smoke_pipeline),
    ("eval_against_itself", eval_against_itself),
    ("make_data_is_deterministic", make_data_is_deterministic),
];
