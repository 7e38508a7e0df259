//! Drive the `cfsum` binary through every subcommand on a tiny corpus.

use std::path::Path;
use std::process::Command;

fn cfsum(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cfsum"))
        .args(args)
        .current_dir(cwd)
        .env("CFSUM_THREADS", "1")
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "cfsum {args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{
  "model": {"layers": 6, "hidden": 16, "heads": 2, "ffn": 32, "dropout": 0.0},
  "warmup_epochs": 1,
  "full_epochs": 1,
  "batch_size": 4
}"#;

#[test]
fn every_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), CONFIG).unwrap();
    let place = ["--config", "tiny.json", "--lf", "1", "--lw", "2", "--lp", "3"];

    cfsum(&["gen-data", "--n", "12", "--test-n", "6", "--out", "data"], d);
    assert!(d.join("data/train.jsonl").exists() && d.join("data/test.jsonl").exists());

    let with = |extra: &[&'static str]| -> Vec<&str> { place.iter().chain(extra).copied().collect() };
    cfsum(&[&["train", "--data", "data/train.jsonl", "--out", "cf"][..], &with(&[])].concat(), d);
    cfsum(
        &[&["train", "--data", "data/train.jsonl", "--modules", "none", "--out", "uni"][..], &with(&[])].concat(),
        d,
    );
    for sub in ["cf/final/model.cfs", "cf/best/config.json", "cf/train_log.json", "uni/final/vocab.json"] {
        assert!(d.join(sub).exists(), "missing {sub}");
    }

    let report = cfsum(
        &["evaluate", "--checkpoint", "cf/final", "--data", "data/test.jsonl", "--out", "ev"],
        d,
    );
    assert!(report.contains("ROUGE-1"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert!(json["rouge1"].as_f64().unwrap() >= 0.0);

    let mask = cfsum(
        &[
            "mask-exp", "--model", "cfsum=cf/final", "--model", "unig=uni/final", "--data", "data/test.jsonl", "--out",
            "mask",
        ],
        d,
    );
    // header plus two models at five rates
    assert_eq!(mask.lines().count(), 11);

    cfsum(
        &[
            "unpair-exp", "--model", "cfsum=cf/final", "--model", "off=cf/final:nofilter", "--data", "data/test.jsonl",
            "--pairs", "1", "--population", "4", "--samplings", "2", "--out", "unpair",
        ],
        d,
    );
    assert!(d.join("unpair/unpair.csv").exists());

    cfsum(&["diag", "--checkpoint", "cf/final", "--data", "data/test.jsonl", "--limit", "2", "--out", "diag"], d);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("diag/diag.json")).unwrap()).unwrap();
    assert_eq!(diag.as_array().unwrap().len(), 2);
}

#[test]
fn ablate_skips_infeasible_placements() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), CONFIG).unwrap();
    cfsum(&["gen-data", "--n", "8", "--test-n", "4", "--out", "data"], d);
    let csv = cfsum(
        &[
            "ablate", "--config", "tiny.json", "--data", "data/train.jsonl", "--test", "data/test.jsonl", "--starts",
            "1,2", "--gaps", "1,2", "--out", "abl",
        ],
        d,
    );
    // with 6 layers and a 3-layer window only (1,1) fits
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cfsum"))
        .args(["train", "--data", "missing.jsonl", "--modules", "q"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
