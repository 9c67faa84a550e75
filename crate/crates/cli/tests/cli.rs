use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mwp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwp"))
        .args(["--quiet", "--threads", "1"])
        .args(args)
        .env_remove("XAI_ENDPOINT_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mwp(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--out", s(&a), "--n", "60", "--seed", "5"]);
    ok(&["generate", "--out", s(&b), "--n", "60", "--seed", "5"]);
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert!(ta.iter().any(|(n, _)| n == "metadata.csv") && ta.iter().any(|(n, _)| n == "feature_audit.csv"));
    assert_eq!(ta, tb);
}

#[test]
fn too_few_records_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mwp(&["generate", "--out", s(&dir.path().join("d")), "--n", "5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_flags_and_help() {
    assert_eq!(mwp(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(mwp(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mwp(&["predict", "--checkpoint", s(&dir.path().join("none.ckpt")), "--record", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let out = ok(&["gradcheck", "--seeds", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("pass")).count(), 15, "{text}");
}

#[test]
fn train_eval_predict_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--out", s(&data), "--n", "120", "--seed", "2"]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "1"]);
    for f in ["best.ckpt", "final.ckpt", "epoch_log.csv", "split.json", "run_config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echo = fs::read_to_string(run.join("run_config.toml")).unwrap();
    assert!(echo.contains("train.epochs = 1") && echo.contains("train.warmup_epochs = 0"), "{echo}");

    let ckpt = run.join("best.ckpt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test"]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics_test.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["mae_kg"].as_f64().unwrap().is_finite());

    // A split index from another seed carries a different hash.
    let wrong = dir.path().join("wrong.json");
    let mut idx: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("split.json")).unwrap()).unwrap();
    let moved = idx["train"].as_array_mut().unwrap().pop().unwrap();
    idx["test"].as_array_mut().unwrap().push(moved);
    fs::write(&wrong, idx.to_string()).unwrap();
    let out = mwp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split-index", s(&wrong)]);
    assert_eq!(out.status.code(), Some(1));

    let csv = data.join("metadata.csv");
    let p1 = ok(&["predict", "--checkpoint", s(&ckpt), "--record", s(&csv), "--row", "4"]).stdout;
    let p2 = ok(&["predict", "--checkpoint", s(&ckpt), "--record", s(&csv), "--row", "4"]).stdout;
    assert_eq!(p1, p2);
    let pred: serde_json::Value = serde_json::from_slice(&p1).unwrap();
    assert!(pred[0]["prediction_kg"].as_f64().unwrap() >= 0.0);

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(&["explain", "--checkpoint", s(&ckpt), "--record", s(&csv), "--row", "4", "--out", s(&e1)]);
    ok(&["explain", "--checkpoint", s(&ckpt), "--record", s(&csv), "--row", "4", "--out", s(&e2)]);
    assert_eq!(tree_bytes(&e1), tree_bytes(&e2));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prediction_kg"].as_f64().unwrap().to_bits(), pred[0]["prediction_kg"].as_f64().unwrap().to_bits());
    assert!(report["efficiency_gap"].as_f64().unwrap().abs() < 1e-6);

    assert_eq!(mwp(&["predict", "--checkpoint", s(&ckpt), "--record", s(&csv), "--row", "100000"]).status.code(), Some(1));
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--n", "100", "--seed", "3"]);
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    ok(&["train", "--data", s(&data), "--out", s(&full), "--epochs", "3"]);
    ok(&["train", "--data", s(&data), "--out", s(&part), "--epochs", "3", "--stop-after", "1"]);
    let resume = part.join("final.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&part), "--epochs", "3", "--resume", s(&resume)]);
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
}
