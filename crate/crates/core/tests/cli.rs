use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sepsis_core::dataset;
use sepsis_core::notes::LEAKAGE_TERMS;

const CONFIG: &str = r#"{
  "synth": {"n_patients": 80, "leakage_rate": 0.5, "outlier_rate": 0.05, "seed": 9},
  "seeds": [0],
  "train": {"epochs": 1, "max_len": 24, "layers": 1, "interpolation": 2, "embed_dim": 12,
            "heads": 2, "d_ff": 16, "cnm_d_model": 8, "cnm_layers": 1, "cnm_heads": 2,
            "cnm_d_ff": 16, "head_hidden": [8]},
  "grid": {"learning_rate": [0.001, 0.003]}
}"#;

fn sepsis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepsis"))
        .args(args)
        .output()
        .expect("run sepsis")
}

fn ok(args: &[&str]) -> String {
    let out = sepsis(args);
    assert!(
        out.status.success(),
        "sepsis {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = sepsis(args);
    assert!(
        !out.status.success(),
        "sepsis {args:?} unexpectedly succeeded"
    );
    String::from_utf8(out.stderr).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Fixture {
    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }
}

/// Synthetic data plus bundles for every standard horizon.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("config.json");
    std::fs::write(&config, CONFIG).unwrap();
    let f = Fixture {
        config: config.display().to_string(),
        root,
        _dir: dir,
    };
    ok(&["synth", "--config", &f.config, "--out", &f.p("data")]);
    ok(&[
        "preprocess",
        "--config",
        &f.config,
        "--data",
        &f.p("data"),
        "--out",
        &f.p("bundle"),
    ]);
    f
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_creates_missing_dir_and_repeats_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, CONFIG).unwrap();
    let c = config.display().to_string();
    let a = dir.path().join("nested/deeper/a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", &c, "--out", a.to_str().unwrap()]);
    ok(&["synth", "--config", &c, "--out", b.to_str().unwrap()]);
    for f in ["events.csv", "notes.csv", "labels.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    ok(&[
        "synth",
        "--config",
        &c,
        "--seed",
        "10",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_ne!(
        std::fs::read(a.join("events.csv")).unwrap(),
        std::fs::read(b.join("events.csv")).unwrap()
    );
}

#[test]
fn preprocess_writes_fixed_shapes_counts_and_clean_tokens() {
    let f = fixture();
    let summary = csv_rows(&f.root.join("bundle/cohort_summary.csv"));
    assert_eq!(summary.len(), 5);
    for (row, t) in summary.iter().zip([12, 18, 24, 30, 36]) {
        assert_eq!(row[0], t.to_string());
        let (total, neg, pos): (usize, usize, usize) = (
            row[1].parse().unwrap(),
            row[2].parse().unwrap(),
            row[3].parse().unwrap(),
        );
        assert_eq!(total, neg + pos);
        let (data, manifest) =
            dataset::load_bundle(&dataset::horizon_dir(&f.root.join("bundle"), t)).unwrap();
        assert_eq!(manifest.cohort.total, total);
        for r in &data.records {
            assert_eq!((r.matrix.rows, r.matrix.cols), (t, data.features.len()));
        }
        let vocab =
            std::fs::read_to_string(f.root.join(format!("bundle/t{t}/vocab.json"))).unwrap();
        let tokens =
            std::fs::read_to_string(f.root.join(format!("bundle/t{t}/texts.jsonl"))).unwrap();
        for term in LEAKAGE_TERMS {
            assert!(
                !vocab.contains(term) && !tokens.contains(term),
                "{term} survived at T={t}"
            );
        }
    }
    let notes = std::fs::read_to_string(f.root.join("data/notes.csv"))
        .unwrap()
        .to_lowercase();
    assert!(
        notes.contains("sepsis") || notes.contains("septic"),
        "fixture has no decoys to remove"
    );
}

#[test]
fn bad_inputs_fail_with_nonzero_exit_naming_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let err = fails(&[
        "synth",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(err.contains("epochz") && err.contains("bad.json"), "{err}");

    let err = fails(&[
        "preprocess",
        "--data",
        "/nonexistent/data",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(err.contains("/nonexistent/data"), "{err}");

    let err = fails(&["train", "--out", dir.path().to_str().unwrap()]);
    assert!(err.contains("bundle"), "{err}");
}

#[test]
fn train_evaluate_round_trip() {
    let f = fixture();
    ok(&[
        "train",
        "--config",
        &f.config,
        "--bundle",
        &f.p("bundle"),
        "--out",
        &f.p("train"),
        "--mode",
        "NOTES_ONLY",
    ]);
    ok(&[
        "evaluate",
        "--checkpoint",
        &f.p("train/model.ckpt"),
        "--bundle",
        &f.p("bundle"),
        "--out",
        &f.p("eval"),
    ]);
    let trained = csv_rows(&f.root.join("train/results.csv"));
    let evaluated = csv_rows(&f.root.join("eval/results.csv"));
    assert_eq!(trained[0][1], "NOTES_ONLY");
    assert_eq!(trained[0][6..], evaluated[0][6..]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.root.join("train/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 5);
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn gridsearch_two_points_gives_two_rows_and_a_winner() {
    let f = fixture();
    ok(&[
        "gridsearch",
        "--config",
        &f.config,
        "--bundle",
        &f.p("bundle"),
        "--out",
        &f.p("grid"),
    ]);
    let rows = csv_rows(&f.root.join("grid/results.csv"));
    let kinds: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(kinds, ["grid", "grid", "winner"]);
    assert!(f.root.join("grid/best_config.json").is_file());
}

#[test]
fn ablate_emits_every_mode_at_every_horizon() {
    let f = fixture();
    let stdout = ok(&[
        "ablate",
        "--config",
        &f.config,
        "--bundle",
        &f.p("bundle"),
        "--out",
        &f.p("abl"),
        "--threads",
        "2",
    ]);
    let table: Vec<&str> = stdout.lines().collect();
    assert_eq!(table.len(), 1 + 4);
    assert_eq!(table[0].split_whitespace().count(), 1 + 5);
    let rows = csv_rows(&f.root.join("abl/results.csv"));
    // One seed: a run, a mean and a std row per cell.
    assert_eq!(rows.len(), 4 * 5 * 3);
    for kind in ["run", "mean", "std"] {
        assert_eq!(rows.iter().filter(|r| r[0] == kind).count(), 20);
    }
}

#[test]
fn attention_export_and_index_errors() {
    let f = fixture();
    ok(&[
        "train",
        "--config",
        &f.config,
        "--bundle",
        &f.p("bundle"),
        "--out",
        &f.p("train"),
    ]);
    let ckpt = f.p("train/model.ckpt");
    let bundle = f.p("bundle");
    let out = f.p("att");
    ok(&[
        "attention",
        "--checkpoint",
        &ckpt,
        "--bundle",
        &bundle,
        "--patient",
        "P00001",
        "--out",
        &out,
    ]);
    for h in 0..2 {
        let path = f.root.join(format!("att/attention_P00001_l0_h{h}.csv"));
        let mut r = csv::Reader::from_path(&path).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(header.len(), 1 + 24);
        assert_eq!(header[1], "0:[CLS]");
        for rec in r.records() {
            let rec = rec.unwrap();
            let mut sum = 0.0;
            for (label, v) in header.iter().zip(rec.iter()).skip(1) {
                let w: f64 = v.parse().unwrap();
                if label.ends_with("[PAD]") {
                    assert_eq!(w, 0.0);
                } else {
                    sum += w;
                }
            }
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
    let err = fails(&[
        "attention",
        "--checkpoint",
        &ckpt,
        "--bundle",
        &bundle,
        "--patient",
        "P00001",
        "--layer",
        "1",
        "--out",
        &out,
    ]);
    assert!(err.contains("valid 0..=0"), "{err}");
    let err = fails(&[
        "attention",
        "--checkpoint",
        &ckpt,
        "--bundle",
        &bundle,
        "--patient",
        "P00001",
        "--head",
        "2",
        "--out",
        &out,
    ]);
    assert!(err.contains("valid 0..=1"), "{err}");
    let err = fails(&[
        "attention",
        "--checkpoint",
        &ckpt,
        "--bundle",
        &bundle,
        "--patient",
        "NOPE",
        "--out",
        &out,
    ]);
    assert!(err.contains("NOPE"), "{err}");
}
