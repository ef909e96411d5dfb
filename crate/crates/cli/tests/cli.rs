use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use unshadow::datasets::synthetic::{toy_triplets, write_dataset, ToySpec};
use unshadow::datasets::{Layout, SplitName};
use unshadow::evaluation::MetricsReport;
use unshadow::imaging::{ImageTensor, ShadowMask};
use unshadow::io::{load_image, save_image, save_mask};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        for (split, count, seed) in [(SplitName::Train, 8, 7), (SplitName::Test, 8, 8)] {
            let spec = ToySpec {
                count,
                size: 48,
                seed,
                ..ToySpec::default()
            };
            write_dataset(&dir.path().join("data"), Layout::Istd, split, &toy_triplets(&spec)).unwrap();
        }
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with the toy config, the temp dataset and temp output dirs.
    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unshadow"));
        cmd.arg("--config")
            .arg(toy_config())
            .arg("--set")
            .arg(format!("dataset.root=\"{}\"", self.path("data").display()))
            .arg("--set")
            .arg(format!("paths.checkpoint_dir=\"{}\"", self.path("ckpt").display()))
            .arg("--set")
            .arg(format!("paths.log_dir=\"{}\"", self.path("logs").display()))
            .args(args)
            .env("RUST_LOG", "info");
        cmd.output().unwrap()
    }

    fn train(&self, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--mode", "weak", "--set", "train.max_steps=3"];
        args.extend_from_slice(extra);
        let out = self.run(&args);
        assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_and_honors_overrides() {
    let ws = Workspace::new();
    let out = ws.train(&["--set", "train.epochs=2", "--set", "train.max_steps=16"]);
    let last = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    assert!(last.is_file(), "missing {}", last.display());
    assert!(ws.path("ckpt/epoch_0002.ckpt").is_file());
    let log = stderr(&out);
    assert!(log.contains("epochs = 2"), "override not in run log:\n{log}");
    let saved = std::fs::read_to_string(ws.path("logs/config.toml")).unwrap();
    assert!(saved.contains("epochs = 2"));
    let csv = std::fs::read_to_string(ws.path("logs/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + 2 epoch rows:\n{csv}");
}

#[test]
fn missing_dataset_root_exits_2_naming_the_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_unshadow"))
        .args(["--config"])
        .arg(toy_config())
        .args(["train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset.root"), "{}", stderr(&out));
}

#[test]
fn bad_override_exits_2_naming_the_key() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--set", "train.epochs=\"many\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.epochs"), "{}", stderr(&out));
}

#[test]
fn diverging_run_exits_3() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--set", "train.lr_base=1e30", "--set", "train.max_steps=8"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn infer_writes_all_stages_and_zero_mask_bypass_is_identity() {
    let ws = Workspace::new();
    ws.train(&[]);
    let ckpt = ws.path("ckpt/last.ckpt");
    let data = ws.path("data/test");

    let output = ws.path("out/pred.png");
    let out = ws.run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        data.join("test_A/toy_000.png").to_str().unwrap(),
        "--mask",
        data.join("test_B/toy_000.png").to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--all-stages",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["pred.png", "pred_shadow_region.png", "pred_removed_region.png", "pred_embedded.png"] {
        assert!(ws.path("out").join(f).is_file(), "missing {f}");
    }
    assert_eq!(load_image(&output).unwrap().dims(), (48, 48));

    let input = ws.path("plain.png");
    let image = ImageTensor::from_fn(48, 48, |y, x, c| ((y * 5 + x * 3 + c * 7) % 256) as f32 / 255.0);
    save_image(&image, &input).unwrap();
    let zero = ws.path("zero.png");
    save_mask(&ShadowMask::zeros(48, 48), &zero).unwrap();
    let same = ws.path("same.png");
    let out = ws.run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--mask",
        zero.to_str().unwrap(),
        "--output",
        same.to_str().unwrap(),
        "--bypass-refine",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&same).unwrap());
}

#[test]
fn infer_rejects_mismatched_mask() {
    let ws = Workspace::new();
    ws.train(&[]);
    let input = ws.path("img.png");
    save_image(&ImageTensor::filled(32, 32, [0.5; 3]), &input).unwrap();
    let mask = ws.path("mask.png");
    save_mask(&ShadowMask::ones(16, 16), &mask).unwrap();
    let out = ws.run(&[
        "infer",
        "--checkpoint",
        ws.path("ckpt/last.ckpt").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--output",
        ws.path("o.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mask"));
}

#[test]
fn eval_self_test_reports_perfect_scores() {
    let ws = Workspace::new();
    let report = ws.path("report");
    let out = ws.run(&["eval", "--gt-self-test", "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Shadow") && table.contains("Non-Shadow"), "{table}");

    let csv = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| l.starts_with("toy_")).collect();
    assert_eq!(rows.len(), 8, "{csv}");

    let parsed = MetricsReport::read_json(&report.join("metrics.json")).unwrap();
    assert_eq!(parsed.count, 8);
    for r in [&parsed.summary.shadow, &parsed.summary.non_shadow, &parsed.summary.all] {
        assert_eq!(r.rmse_lab, Some(0.0));
        assert_eq!(r.psnr_rgb, Some(unshadow::evaluation::PSNR_CAP));
        assert!((r.ssim_rgb.unwrap() - 1.0).abs() < 1e-9);
    }
    let again = ws.path("again.json");
    parsed.write_json(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(report.join("metrics.json")).unwrap());
}

#[test]
fn eval_scores_a_checkpoint() {
    let ws = Workspace::new();
    ws.train(&[]);
    let report = ws.path("report");
    let out = ws.run(&[
        "eval",
        "--checkpoint",
        ws.path("ckpt/last.ckpt").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed = MetricsReport::read_json(&report.join("metrics.json")).unwrap();
    assert_eq!(parsed.samples.len(), 8);
    assert!(parsed.summary.shadow.rmse_lab.unwrap() > 0.0);
}

fn preview(ws: &Workspace, name: &str, extra: &[&str]) -> ImageTensor {
    let path = ws.path(name);
    let mut args = vec!["augment-preview", "--samples", "3", "--output", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = ws.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    load_image(&path).unwrap()
}

#[test]
fn augment_preview_grid_layout_and_determinism() {
    let ws = Workspace::new();
    let a = preview(&ws, "a.png", &[]);
    // 3 rows of 48px cells: original, inpainted, three illumination variants.
    assert_eq!(a.dims(), (3 * 48, 5 * 48));
    let b = preview(&ws, "b.png", &[]);
    assert_eq!(std::fs::read(ws.path("a.png")).unwrap(), std::fs::read(ws.path("b.png")).unwrap());
    assert_eq!(a, b);

    let c = preview(&ws, "c.png", &["--set", "augment.inpaint_enabled=false"]);
    assert_eq!(c.dims(), (3 * 48, 4 * 48));
}

#[test]
fn seed_flag_changes_training() {
    let ws = Workspace::new();
    ws.train(&["--seed", "1"]);
    let one = std::fs::read(ws.path("logs/losses.csv")).unwrap();
    std::fs::remove_dir_all(ws.path("logs")).unwrap();
    ws.train(&["--seed", "1", "--deterministic"]);
    let again = std::fs::read(ws.path("logs/losses.csv")).unwrap();
    assert_eq!(one, again);
    std::fs::remove_dir_all(ws.path("logs")).unwrap();
    ws.train(&["--seed", "2"]);
    let other = std::fs::read(ws.path("logs/losses.csv")).unwrap();
    assert_ne!(one, other);
}
