use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use igahide::dataio::{synthetic_images, write_image};

const TINY: &[&str] = &[
    "--height",
    "16",
    "--width",
    "16",
    "--base-width",
    "4",
    "--ext-blocks",
    "1",
    "--emb-blocks",
    "1",
    "--dec-blocks",
    "2",
    "--disc-blocks",
    "1",
    "--k",
    "8",
    "--l",
    "4",
    "--batch-size",
    "4",
    "--seed",
    "3",
];

fn igahide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igahide"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--synthetic",
        "8",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(TINY);
    let o = igahide(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn cover(dir: &Path) -> PathBuf {
    let path = dir.join("cover.png");
    write_image(&path, &synthetic_images(1, 16, 16, 9)[0]).unwrap();
    path
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(igahide(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        igahide(&["train", "--synthetic", "4", "--k", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        igahide(&["train", "--synthetic", "4", "--set", "nonsense=1"])
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = igahide(&[
        "extract",
        "--checkpoint",
        p(&missing),
        "--image",
        p(&missing),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"IGAH").unwrap();
    let o = igahide(&["extract", "--checkpoint", p(&junk), "--image", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_logs_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    for f in [
        "last.ckpt",
        "train_log.tsv",
        "steps_log.tsv",
        "manifest.json",
        "config.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["k"], "8");
    assert_eq!(manifest["config"]["seed"], "3");
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let o = igahide(&[
        "train",
        "--config",
        p(&run.join("config.txt")),
        "--synthetic",
        "8",
        "--out",
        p(&dir.path().join("again")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run.join("steps_log.tsv")).unwrap(),
        fs::read(dir.path().join("again/steps_log.tsv")).unwrap()
    );
}

#[test]
fn resume_appends_one_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let mut args = vec![
        "train",
        "--synthetic",
        "8",
        "--epochs",
        "2",
        "--resume",
        "--out",
        p(&run),
    ];
    args.extend_from_slice(TINY);
    let o = igahide(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().nth(2).unwrap().starts_with("2\t"));
}

#[test]
fn embed_extract_and_message_length_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let ckpt = run.join("last.ckpt");
    let cover = cover(dir.path());
    let encoded = dir.path().join("enc.png");
    let o = igahide(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&cover),
        "--bits",
        "10110010",
        "--output",
        p(&encoded),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PSNR"));
    assert!(encoded.exists());

    let o = igahide(&[
        "extract",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&encoded),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bits = stdout(&o).trim().to_string();
    assert_eq!(bits.len(), 8);
    assert!(bits.chars().all(|c| c == '0' || c == '1'));

    let o = igahide(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&cover),
        "--bits",
        "101",
        "--out",
        p(&dir.path().join("e2")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("k = 8"), "{}", stderr(&o));
    let o = igahide(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&cover),
        "--hex",
        "zz",
        "--out",
        p(&dir.path().join("e3")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = igahide(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&cover),
        "--hex",
        "b2",
        "--out",
        p(&dir.path().join("e4")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn evaluate_and_visualize_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let ckpt = run.join("last.ckpt");
    let eval_dir = dir.path().join("eval");
    let o = igahide(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--synthetic",
        "4",
        "--val-fraction",
        "1",
        "--batch-size",
        "2",
        "--out",
        p(&eval_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 7);
    assert!(eval_dir.join("eval.txt").exists());

    let vis = dir.path().join("vis");
    let o = igahide(&[
        "visualize",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&cover(dir.path())),
        "--out",
        p(&vis),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(vis.join("iga_mask.png").exists() && vis.join("sobel_mask.png").exists());
    assert!(vis.join("manifest.json").exists());
}

#[test]
fn ablate_prints_a_row_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--synthetic",
        "4",
        "--epochs",
        "1",
        "--with-sobel",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(TINY);
    let o = igahide(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for label in ["Basic", "w MC.", "w Att.", "Both", "Model-S"] {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }
    assert!(out.join("ablation.json").exists());
}
