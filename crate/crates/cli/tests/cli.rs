use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trimodal"));
    c.env_remove("TRIMODAL_DATA_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 4] = ["--categories", "3", "--per-category", "8"];

/// Small corpus plus a one-epoch pre-training checkpoint, shared by the tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let mut args = vec!["synth"];
        args.extend(SMALL);
        ok(d.path(), &args);
        ok(d.path(), &["pretrain", "--epochs", "1", "--batch-size", "8"]);
        d
    })
    .path()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--out", "corpus"];
    args.extend(SMALL);
    let first = ok(d.path(), &args);
    assert!(first.contains("samples             24"), "{first}");
    let refused = run(d.path(), &args);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    args.push("--force");
    let again = ok(d.path(), &args);
    let digest = |s: &str| s.lines().find(|l| l.starts_with("manifest digest")).unwrap().to_string();
    assert_eq!(digest(&first), digest(&again));
}

#[test]
fn synth_rejects_single_category() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["synth", "--categories", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 categories"));
}

#[test]
fn data_directory_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["synth"];
    args.extend(SMALL);
    let out = bin().current_dir(d.path()).env("TRIMODAL_DATA_DIR", "elsewhere").args(&args).output().unwrap();
    assert!(out.status.success());
    assert!(d.path().join("elsewhere").join("manifest.json").is_file());
}

#[test]
fn pretrain_echoes_default_weights() {
    let d = fixture();
    let h = read_json(d.join("runs/pretrain.history.json"));
    assert_eq!(h["pretrain"].as_array().unwrap().len(), 1);
    let out = run(d, &["eval", "--mode", "retrieval", "--checkpoint", "runs/pretrain.ckpt", "--k", "1,2"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for col in ["R@1 img-txt", "R@2 txt-aud", "R@2 aud-img", "R@1 avg"] {
        assert!(stdout.contains(col), "{stdout}");
    }
}

#[test]
fn pair_restriction_zeroes_other_terms() {
    let d = fixture();
    let stdout =
        ok(d, &["pretrain", "--epochs", "1", "--batch-size", "8", "--pairs", "img-txt", "--out", "runs/bimodal.ckpt"]);
    assert!(stdout.contains("alpha 1 beta 0 gamma 0 tau 0.07"), "{stdout}");
    let h = read_json(d.join("runs/bimodal.history.json"));
    let l = &h["pretrain"][0]["losses"];
    assert_eq!(l["loss_txt_aud"].as_f64(), Some(0.0));
    assert_eq!(l["loss_aud_img"].as_f64(), Some(0.0));
    assert!(l["loss_img_txt"].as_f64().unwrap() > 0.0);
}

#[test]
fn alpha_flag_scales_img_txt_term() {
    let d = fixture();
    let stdout =
        ok(d, &["pretrain", "--epochs", "1", "--batch-size", "8", "--alpha", "0.5", "--out", "runs/half.ckpt"]);
    assert!(stdout.contains("alpha 0.5 beta 1 gamma 1"), "{stdout}");
    let h = read_json(d.join("runs/half.history.json"));
    let e = &h["pretrain"][0];
    let raw = e["losses"]["loss_img_txt"].as_f64().unwrap();
    assert_eq!(e["weighted"][0].as_f64().unwrap(), 0.5 * raw);
}

#[test]
fn mmr_requires_a_valid_missing_modality() {
    let d = fixture();
    let absent = run(d, &["mmr"]);
    assert_eq!(absent.status.code(), Some(2));
    let bad = run(d, &["mmr", "--missing", "video"]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    for v in ["image", "text", "audio"] {
        assert!(msg.contains(v), "{msg}");
    }
}

#[test]
fn mmr_trains_and_evaluates_text_scenario() {
    let d = fixture();
    let stdout = ok(d, &["mmr", "--missing", "text", "--epochs", "2", "--batch-size", "8"]);
    assert!(stdout.contains("delta 0.75 eta 1 theta 0.25"), "{stdout}");
    assert!(stdout.contains("(unchanged)"));
    ok(d, &["eval", "--mode", "mmr", "--checkpoint", "runs/mmr-text.ckpt", "--out", "runs/text-a"]);
    ok(d, &["eval", "--mode", "mmr", "--checkpoint", "runs/mmr-text.ckpt", "--out", "runs/text-b"]);
    let a = std::fs::read(d.join("runs/text-a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("runs/text-b.json")).unwrap());
    let r: Value = serde_json::from_slice(&a).unwrap();
    assert!(r["values"]["Accuracy"].is_number(), "{r}");
    assert!(r["values"]["METEOR-exact"].is_number(), "{r}");
    let txt = std::fs::read_to_string(d.join("runs/text-a.txt")).unwrap();
    assert!(txt.contains("config digest:"));
}

#[test]
fn eval_rejects_stage_mismatch() {
    let d = fixture();
    let out = run(d, &["eval", "--mode", "mmr", "--checkpoint", "runs/pretrain.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn zero_shot_reports_top_k_columns() {
    let d = fixture();
    let stdout = ok(d, &["eval", "--mode", "zero-shot", "--checkpoint", "runs/pretrain.ckpt", "--k", "1,2"]);
    assert!(stdout.contains("top-1") && stdout.contains("top-2"), "{stdout}");
    let r = read_json(d.join("runs/eval-zero-shot-audio.json"));
    assert!(r["values"]["top-1"].as_f64().unwrap() <= 100.0);
}

#[test]
fn missing_dataset_is_a_path_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["pretrain", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("path error"));
}

#[test]
fn single_seed_ablation_table() {
    let d = fixture();
    let stdout =
        ok(d, &["ablate", "--seeds", "17", "--epochs", "1", "--batch-size", "8", "--k", "3", "--out", "runs/abl"]);
    assert!(stdout.contains("single seed (17)"), "{stdout}");
    let header = stdout.lines().next().unwrap();
    assert_eq!(header.split("  ").filter(|s| !s.trim().is_empty()).count(), 8, "{header}");
    let j = read_json(d.join("runs/abl.json"));
    let rows = j["table"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for r in rows {
        assert_eq!(r["recall"][3].as_f64(), Some(1.0), "R@3 with 3 test samples is a full recall");
    }
}
