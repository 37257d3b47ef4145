use std::path::Path;
use std::process::{Command, Output};

fn msaw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msaw")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path, seed: &str) {
    let o = msaw(&[
        "gen-data",
        "--out",
        s(dir),
        "--seed",
        seed,
        "--train-per-class",
        "6",
        "--test-per-class",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a, "7");
    small_dataset(&b, "7");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 18 + 12 + 2);
    assert!(ta == tb);
}

#[test]
fn six_class_preset_writes_six_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = msaw(&["gen-data", "--out", s(tmp.path()), "--classes", "6", "--train-per-class", "1", "--test-per-class", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let classes: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(tmp.path().join("classes.json")).unwrap()).unwrap();
    assert_eq!(classes.len(), 6);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(msaw(&["bogus"]).status.code(), Some(1));
    assert_eq!(msaw(&["gen-data", "--out", "x", "--classes", "4"]).status.code(), Some(1));
    assert_eq!(msaw(&["ablate", "--manifest", "m", "--out", "o", "--mode", "nope"]).status.code(), Some(1));
    assert_eq!(msaw(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_and_missing_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "1");
    let manifest = tmp.path().join("manifest.csv");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rat": 0.1}"#).unwrap();
    let o = msaw(&["train", "--manifest", s(&manifest), "--out", s(&tmp.path().join("t")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"));
    let o = msaw(&["train", "--manifest", s(&manifest), "--out", s(&tmp.path().join("t")), "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = msaw(&["train", "--manifest", s(&tmp.path().join("none.csv")), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("none.csv"));
}

#[test]
fn train_eval_diagnose_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3");
    let manifest = data.join("manifest.csv");
    let train = tmp.path().join("train");
    let o = msaw(&["train", "--manifest", s(&manifest), "--out", s(&train), "--epochs", "2", "--triplets", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("\"epochs\": 2"), "resolved config is echoed");
    for f in ["model.ckpt", "train_log.csv", "steps.csv", "config.json"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let ckpt = train.join("model.ckpt");

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let o = msaw(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&e1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("Average"));
    let o = msaw(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&e2), "--workers", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tree(&e1) == tree(&e2), "worker count changes nothing");
    let weights = std::fs::read_to_string(e1.join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 12);
    for line in weights.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).take(3).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "{line}");
    }

    let diag = tmp.path().join("diag");
    let o = msaw(&["diagnose", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().filter(|l| l.contains("separation gap")).count(), 3);
    let sim = std::fs::read_to_string(diag.join("similarity_scale3.csv")).unwrap();
    assert_eq!(sim.lines().count(), 13);
}

#[test]
fn eval_rejects_a_foreign_class_set() {
    let tmp = tempfile::tempdir().unwrap();
    let (three, six) = (tmp.path().join("three"), tmp.path().join("six"));
    small_dataset(&three, "1");
    let o = msaw(&["gen-data", "--out", s(&six), "--classes", "6", "--train-per-class", "1", "--test-per-class", "1"]);
    assert!(o.status.success());
    let train = tmp.path().join("t");
    let o = msaw(&["train", "--manifest", s(&three.join("manifest.csv")), "--out", s(&train), "--epochs", "1", "--triplets", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = msaw(&["eval", "--checkpoint", s(&train.join("model.ckpt")), "--manifest", s(&six.join("manifest.csv")), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn ablate_writes_summary_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "5");
    let out = tmp.path().join("abl");
    let o = msaw(&[
        "ablate", "--manifest", s(&data.join("manifest.csv")), "--out", s(&out), "--mode", "baseline",
        "--seeds", "2", "--epochs", "1", "--triplets", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.starts_with("mode,runs,accuracy_mean"));
    assert!(table.lines().any(|l| l.starts_with("full,2,")));
    assert!(table.lines().any(|l| l.starts_with("baseline,2,")));
    assert_eq!(std::fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 5);
}

#[test]
fn grad_check_passes() {
    let o = msaw(&["grad-check", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("full pipeline") && !text.contains("FAIL"));
}
