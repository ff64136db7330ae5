use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hiersgg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn micro() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/micro")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every number within `tol`, everything else equal.
fn assert_json_close(a: &Value, b: &Value, tol: f64, at: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= tol, "{at}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{at}: length");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                assert_json_close(u, v, tol, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{at}: keys");
            for (k, u) in x {
                assert_json_close(u, &y[k], tol, &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{at}"),
    }
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let out = ok(&["gradcheck", "--seed", "0"]);
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.starts_with("max_rel_err "), "{line}");
    assert!(line.trim_end().ends_with("<= 1e-4"), "{line}");
}

#[test]
fn external_logits_match_golden_report() {
    let dir = micro();
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("golden_report.json")).unwrap()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for workers in ["1", "3"] {
        let report = tmp.path().join(format!("r{workers}.json"));
        ok(&[
            "eval", "--data", p(&dir), "--logits", p(&dir.join("preds.jsonl")), "--k", "5,20",
            "--zero-shot", p(&dir.join("train_triplets.json")), "--workers", workers, "--report", p(&report),
        ]);
        let got: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_json_close(&got["reports"], &golden["reports"], 1e-12, "reports");
        assert_eq!(got["options"]["ks"], serde_json::json!([5, 20]));
    }
}

#[test]
fn report_goes_to_stdout_without_a_path() {
    let dir = micro();
    let out = ok(&["eval", "--data", p(&dir), "--logits", p(&dir.join("preds.jsonl")), "--tasks", "predcls", "--k", "20"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["reports"][0]["task"], "predcls");
    // without training triplets there is no zero-shot number
    assert!(doc["reports"][0]["metrics"][0]["zero_shot_recall"].is_null());
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"train_images": 12, "test_images": 5}"#).unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["synth", "--spec", p(&spec), "--seed", "3", "--out", p(&a)]);
    ok(&["synth", "--spec", p(&spec), "--seed", "3", "--out", p(&b)]);
    ok(&["synth", "--spec", p(&spec), "--seed", "4", "--out", p(&c)]);
    let digest = |d: &Path| hiersgg::data::dir_digest(d).unwrap();
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn train_eval_rank_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"train_images": 30, "test_images": 6}"#).unwrap();
    ok(&["synth", "--spec", p(&spec), "--out", p(&data)]);
    let config = tmp.path().join("train.json");
    std::fs::write(&config, r#"{"learning_rate": 0.1, "epochs": 2, "hidden_dim": 16}"#).unwrap();
    let ckpt = tmp.path().join("model.hsgt");
    ok(&["train", "--data", p(&data), "--hierarchy", p(&data.join("hierarchy.json")), "--config", p(&config), "--seed", "5", "--out", p(&ckpt)]);
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(tmp.path().join("model.hsgt.curve.csv")).unwrap();
    assert!(curve.lines().count() > 2);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("model.hsgt.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 5);
    assert_eq!(echoed["hidden_dim"], 16);

    let report = tmp.path().join("report.json");
    ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--k", "20,50", "--report", p(&report)]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["reports"].as_array().unwrap().len(), 3);

    let out = ok(&["rank", "--data", p(&data), "--ckpt", p(&ckpt), "--image", "test00001", "--top", "4"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.starts_with("rank"));
    let out = ok(&["rank", "--data", p(&data), "--ckpt", p(&ckpt), "--image", "test00001", "--top", "4", "--jsonl"]);
    let ranks: Vec<u64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["rank"].as_u64().unwrap())
        .collect();
    assert_eq!(ranks, vec![1, 2, 3, 4]);

    let dot = tmp.path().join("g.dot");
    ok(&["export-dot", "--data", p(&data), "--ckpt", p(&ckpt), "--image", "test00001", "--top", "3", "--task", "sgdet", "--out", p(&dot)]);
    let text = std::fs::read_to_string(&dot).unwrap();
    assert!(text.starts_with("digraph scene_graph {"));
    assert_eq!(text.matches("class=\"tp\"").count() + text.matches("class=\"fp\"").count(), 3);
}

#[test]
fn non_finite_loss_fails_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"train_images": 10, "test_images": 2}"#).unwrap();
    ok(&["synth", "--spec", p(&spec), "--out", p(&data)]);
    let ckpt = tmp.path().join("m.hsgt");
    let out = run(&["train", "--data", p(&data), "--lr", "1e300", "--out", p(&ckpt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(!ckpt.exists());
}

#[test]
fn bad_invocations_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let bad_config = tmp.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"learning_rte": 0.1}"#).unwrap();
    let (dir, hierarchy) = (micro(), micro().join("hierarchy.json"));
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--data", ".", "--bogus"],
        vec!["eval", "--data", p(&missing), "--logits", p(&missing)],
        vec!["train", "--data", p(&dir), "--config", p(&bad_config), "--out", p(&missing)],
        vec!["eval", "--data", p(&dir), "--logits", p(&hierarchy)],
        vec!["synth"],
    ];
    for args in cases {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(out.stdout.is_empty(), "{args:?} wrote to stdout");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}
