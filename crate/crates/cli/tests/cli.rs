use std::path::Path;
use std::process::{Command, Output};

fn paia(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paia"))
        .env("PAIA_DATA_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

/// Small corpus, one-epoch base and a one-concept delta.
fn fixture(root: &Path) {
    ok(paia(root, &["gen-data", "--concepts", "6"]));
    ok(paia(root, &["train-base", "--epochs", "1"]));
    ok(paia(root, &["finetune", "--concept", "0", "--epochs", "2"]));
}

const QUICK: &[&str] = &["--t-grid", "25,75", "--eps-draws", "1", "--targets-per-concept", "2"];

#[test]
fn gen_data_is_deterministic_and_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    ok(paia(r, &["gen-data", "--concepts", "3", "--out", &r.join("a").to_string_lossy()]));
    ok(paia(r, &["gen-data", "--concepts", "3", "--out", &r.join("b").to_string_lossy()]));
    for f in ["images.bin", "corpus.json"] {
        assert_eq!(std::fs::read(r.join("a").join(f)).unwrap(), std::fs::read(r.join("b").join(f)).unwrap());
    }
    let again = paia(r, &["gen-data", "--concepts", "3", "--out", &r.join("a").to_string_lossy()]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    ok(paia(r, &["gen-data", "--concepts", "3", "--force", "--out", &r.join("a").to_string_lossy()]));
    let manifest = std::fs::read_to_string(r.join("a/manifest.json")).unwrap();
    for key in ["manifest_hash", "machine", "version", "seeds"] {
        assert!(manifest.contains(key), "{key} missing from manifest");
    }
}

#[test]
fn argument_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&paia(dir.path(), &["gen-data", "--concepts", "60"])), 2);
    assert_eq!(code(&paia(dir.path(), &["analyze", "--study", "nope"])), 2);
    assert_eq!(code(&paia(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn missing_inputs_exit_3_and_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = paia(dir.path(), &["train-base", "--epochs", "1"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
    let o = paia(dir.path(), &["analyze", "--study", "sweeps"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("paia benchmark"), "{}", stderr(&o));
}

#[test]
fn lemma1_study_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(paia(dir.path(), &["analyze", "--study", "lemma1", "--probes", "100"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 violations"));
    assert!(dir.path().join("reports/lemma1/lemma1.csv").exists());
}

#[test]
fn audit_budget_floor_cache_reuse_and_arch_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    fixture(r);
    let corpus = r.join("corpus");
    let corpus = corpus.to_string_lossy();
    let model = r.join("deltas/concept_0_none.lora");
    let model = model.to_string_lossy();
    let base_args = |budget: &'static str| -> Vec<String> {
        let mut v: Vec<String> = [
            "audit",
            "--model",
            &model,
            "--target-images",
            &corpus,
            "--irrelevant-images",
            &corpus,
            "--concept",
            "0,1",
            "--irrelevant-budget",
            budget,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        v.extend(QUICK.iter().map(|s| s.to_string()));
        v
    };
    let run = |extra: &[&str]| {
        let mut v = base_args(if extra.contains(&"4") { "4" } else { "8" });
        v.extend(extra.iter().filter(|s| **s != "4").map(|s| s.to_string()));
        paia(r, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };

    assert_eq!(code(&run(&["4"])), 2);

    let out1 = r.join("r1");
    let o = ok(run(&["--reuse-cache", "--out", &out1.to_string_lossy()]));
    assert_eq!(stderr(&o).matches("irrelevant feature extraction").count(), 1);
    assert!(out1.join("audit_c0.csv").exists() && out1.join("audit_c1.csv").exists());
    let report = std::fs::read_to_string(out1.join("audit.json")).unwrap();
    assert!(report.contains("manifest_hash"));

    let out2 = r.join("r2");
    let o = ok(run(&["--out", &out2.to_string_lossy()]));
    assert_eq!(stderr(&o).matches("irrelevant feature extraction").count(), 2);

    // reports are write-once
    assert_eq!(code(&run(&["--out", &out2.to_string_lossy()])), 2);

    let other = r.join("narrow.ckpt");
    ok(paia(r, &["train-base", "--epochs", "1", "--width", "32", "--out", &other.to_string_lossy()]));
    let o = run(&["--base", &other.to_string_lossy(), "--out", &r.join("r3").to_string_lossy()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("wq"));
}

#[test]
fn config_file_feeds_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    ok(paia(r, &["gen-data", "--concepts", "4"]));
    let cfg = r.join("paia.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\nlr = 0.002\n").unwrap();
    let cfg = cfg.to_string_lossy();
    ok(paia(r, &["--config", &cfg, "train-base", "--lr", "0.004"]));
    let report = std::fs::read_to_string(r.join("base.report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    let train = &v["manifest"]["config"]["train"];
    assert_eq!(train["epochs"], 1);
    assert_eq!(train["lr"], 0.004);
    assert_eq!(v["manifest"]["sources"]["train.lr"], "flag");
    assert_eq!(v["manifest"]["sources"]["train.epochs"], "config");

    std::fs::write(r.join("bad.toml"), "colour = 3\n").unwrap();
    let o = paia(r, &["--config", &r.join("bad.toml").to_string_lossy(), "gen-data"]);
    assert_eq!(code(&o), 2);
}
