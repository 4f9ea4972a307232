use std::path::Path;
use std::process::{Command, Output};

fn prformer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prformer"))
        .args(args)
        .current_dir(dir)
        .env_remove("PRFORMER_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--lookback", "24", "--pred-len", "6", "--windows", "2,4", "--d-model", "8", "--heads", "2",
    "--e-layers", "1", "--conv-channels", "3", "--epochs", "2", "--batch-size", "16",
];

fn trained(dir: &Path) {
    let o = prformer(&["synth", "--out", "s.csv", "--rows", "300"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["train", "--data", "s.csv", "--out", "run", "--seed", "3"];
    args.extend_from_slice(TINY);
    let o = prformer(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_history_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,lr,train_mae,val_mae,val_mse,seconds");
    assert_eq!(history.lines().count(), 3);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    assert!(metrics["test"]["mse"].as_f64().unwrap() > 0.0);
    let ckpt = std::fs::read(dir.path().join("run/model.ckpt")).unwrap();
    assert_eq!(&ckpt[..8], b"PRFCKPT1");
}

#[test]
fn evaluate_predict_and_inspect_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);

    let o = prformer(&["evaluate", "--checkpoint", "run/model.ckpt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let recorded: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mse"], recorded["test"]["mse"]);

    let o = prformer(&["predict", "--checkpoint", "run/model.ckpt", "--out", "p.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "window_start,horizon_step,channel,y_true,y_pred");
    // test split of 300 rows (7:1:2) is 60 rows plus 24 rows of borrowed context
    assert_eq!(preds.lines().count() - 1, (84 - 24 - 6 + 1) * 6 * 3);

    let o = prformer(
        &["inspect-embeddings", "--checkpoint", "run/model.ckpt", "--out", "e.csv", "--windows", "4", "--run-id", "r1"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = std::fs::read_to_string(d.join("e.csv")).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 3 + 8);
    assert_eq!(lines.count(), 4 * 3);
    assert!(emb.lines().nth(1).unwrap().starts_with("r1,"));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"lookback": 720, "pyramidal_windows": [24, 48, 72, 144], "e_layers": 5,
        "d_model": 720, "dropout": 0.1, "batch_size": 256, "lr": 0.001}"#)
    .unwrap();
    let o = prformer(&["train", "--config", "c.json", "--dry-run", "--lr", "0.0005"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let run: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(run["lookback"], 720);
    assert_eq!(run["pyramidal_windows"], serde_json::json!([24, 48, 72, 144]));
    assert_eq!(run["lr"], 0.0005);
    assert!(stderr(&o).contains("warning: window 72"));
}

#[test]
fn published_row_parses_and_starts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = prformer(&["synth", "--out", "s.csv", "--rows", "2000"], d);
    assert!(o.status.success());
    std::fs::write(
        d.join("etth1.json"),
        r#"{"lookback": 720, "pyramidal_windows": [24, 48, 72, 144], "e_layers": 5, "d_model": 720,
            "dropout": 0.1, "batch_size": 256, "lr": 0.001, "data": "s.csv", "epochs": 1}"#,
    )
    .unwrap();
    // one optimizer step is enough to show the run starts
    let o = prformer(&["train", "--config", "etth1.json", "--max-batches", "1", "--out", "r"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch   1"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = prformer(&["train", "--config", "missing.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage:"));

    let o = prformer(&["no-such-command"], d);
    assert_eq!(o.status.code(), Some(1));

    let o = prformer(&["train", "--data", "missing.csv"], d);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(d.join("bad.csv"), "date,a\n2020-01-01,1.0\n2020-01-02,oops\n").unwrap();
    let o = prformer(&["train", "--data", "bad.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oops"), "{}", stderr(&o));

    let o = prformer(&["train", "--heads", "7", "--data", "bad.csv"], d);
    assert_eq!(o.status.code(), Some(1));

    // an exploding learning rate ends in a numeric failure
    prformer(&["synth", "--out", "s.csv", "--rows", "300"], d);
    let mut args = vec!["train", "--data", "s.csv", "--lr", "1e30", "--out", "x"];
    args.extend_from_slice(TINY);
    let o = prformer(&args, d);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn check_pe_reports_small_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let o = prformer(&["check-pe", "--d-model", "8", "--trials", "100"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let dev: f64 = out.split("max deviation ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(dev < 1e-9, "{out}");
    let o = prformer(&["check-pe", "--d-model", "9"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = prformer(
        &["bench", "--lookbacks", "144,288,576", "--d-model", "32", "--reps", "2", "--d-models", "16,32", "--out", "b.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("pre,144,32,2,"));
    assert!(csv.lines().nth(4).unwrap().starts_with("encoder,720,16,2,"));

    let o = prformer(&["bench", "--lookbacks", "144,288"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn env_seed_is_the_last_resort() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_prformer"));
        cmd.args(["train", "--dry-run"]).args(extra).current_dir(d).env_remove("PRFORMER_SEED");
        if let Some(v) = env {
            cmd.env("PRFORMER_SEED", v);
        }
        let o = cmd.output().unwrap();
        let _: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        o
    };
    run(None, &[]);
    run(Some("9"), &["--seed", "4"]);

    prformer(&["synth", "--out", "s.csv", "--rows", "300"], d);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prformer"));
    let mut args = vec!["train", "--data", "s.csv", "--out", "r", "--epochs", "1"];
    args.extend_from_slice(&TINY[..TINY.len() - 4]);
    let o = cmd.args(&args).current_dir(d).env("PRFORMER_SEED", "17").output().unwrap();
    assert!(stderr(&o).contains("seed 17"), "{}", stderr(&o));
}
