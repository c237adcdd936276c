//! End-to-end runs of the `rupformer` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rupformer::csv_io::load_csv;
use rupformer::Checkpoint;
use rupformer_core::kpi::chronological_split;
use rupformer_core::metrics::trajectory;

fn rupformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rupformer"))
        .args(args)
        .env("RUPFORMER_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rupformer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = rupformer(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, days: &str, carriers: &str) -> PathBuf {
    let path = dir.join(format!("kpi_{days}_{carriers}.csv"));
    ok(&["gen", "--out", s(&path), "--days", days, "--carriers", carriers, "--seed", "42"]);
    path
}

#[test]
fn gen_writes_every_row_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let out = ok(&["gen", "--out", s(&a), "--days", "90", "--carriers", "3", "--seed", "42"]);
    assert!(out.contains("wrote 25920 rows"), "{out}");
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text.iter().filter(|&&b| b == b'\n').count(), 1 + 25_920);

    let b = dir.path().join("b.csv");
    ok(&["gen", "--out", s(&b), "--days", "90", "--carriers", "3", "--seed", "42"]);
    assert_eq!(std::fs::read(&b).unwrap(), text);

    let err = fails(&["gen", "--out", s(&a), "--days", "1", "--carriers", "3"], 1);
    assert!(err.contains("--force"), "{err}");
    ok(&["gen", "--out", s(&a), "--days", "1", "--carriers", "3", "--force"]);
    assert_eq!(load_csv(&a).unwrap()[0].len(), 96);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    fails(&["gen", "--out", s(&out), "--carriers", "22"], 1);
    fails(&["gen", "--out", s(&out), "--days", "0"], 1);
    fails(&["frobnicate"], 1);
    assert!(!out.exists());
    assert!(rupformer(&["--help"]).status.success());

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"trian": {}}"#).unwrap();
    let err = fails(&["gen", "--out", s(&out), "--config", s(&bad_cfg)], 1);
    assert!(err.contains("unknown field"), "{err}");
}

#[test]
fn io_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    fails(&["train", "--data", s(&dir.path().join("absent.csv")), "--out", s(&ck)], 3);
    let nested = dir.path().join("no/such/dir/x.csv");
    fails(&["gen", "--out", s(&nested), "--days", "1", "--carriers", "1"], 3);
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3", "1");
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"epochs": 3, "lr": 1e30, "clip_norm": 1e30},
            "hyperparams": {"d_emb": 8, "heads": 2, "d_ff": 16},
            "split": {"train_days": 1, "val_days": 1, "test_days": 1}}"#,
    )
    .unwrap();
    let err = fails(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("m"))], 2);
    assert!(err.contains("non-finite"), "{err}");
}

/// Desk-scale run: 3 carriers, 30 days, 20 epochs.
fn desk_train(dir: &Path, data: &Path, tag: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("desk.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 7, "train": {"epochs": 20}, "data": {"stride": 8},
            "split": {"train_days": 20, "val_days": 5, "test_days": 5}}"#,
    )
    .unwrap();
    let ck = dir.join(format!("{tag}.ckpt"));
    let hist = dir.join(format!("{tag}.jsonl"));
    ok(&["train", "--data", s(data), "--config", s(&cfg), "--out", s(&ck), "--history", s(&hist)]);
    (ck, hist)
}

#[test]
fn train_forecast_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "30", "3");
    let (ck, hist) = desk_train(dir.path(), &data, "a");
    let (ck2, _) = desk_train(dir.path(), &data, "b");
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());

    let history = std::fs::read_to_string(&hist).unwrap();
    let records: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty() && records.len() <= 20);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i + 1);
        for key in ["train_loss", "val_loss", "lr", "stopped"] {
            assert!(r.get(key).is_some(), "{key} missing");
        }
    }
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.train_config.seed, 7);

    // forecasts
    let f96 = dir.path().join("f96.csv");
    ok(&["forecast", "--model", s(&ck), "--data", s(&data), "--carrier", "1",
        "--from", "2024-01-20T00:00:00Z", "--horizon", "96", "--out", s(&f96)]);
    let text = std::fs::read_to_string(&f96).unwrap();
    assert_eq!(text.lines().count(), 97);
    assert!(text.lines().nth(1).unwrap().starts_with("2024-01-20T00:00:00Z,1,"));
    let f672 = dir.path().join("f672.csv");
    ok(&["forecast", "--model", s(&ck), "--data", s(&data), "--carrier", "1",
        "--from", "2024-01-31T00:00:00Z", "--horizon", "672", "--out", s(&f672)]);
    assert_eq!(std::fs::read_to_string(&f672).unwrap().lines().count(), 673);

    let err = fails(&["forecast", "--model", s(&ck), "--data", s(&data), "--carrier", "1",
        "--from", "2024-01-01T00:30:00Z", "--horizon", "4", "--out", s(&f96)], 1);
    assert!(err.contains("needs 4 observations"), "{err}");
    let two = gen(dir.path(), "2", "2");
    fails(&["forecast", "--model", s(&ck), "--data", s(&two), "--carrier", "2",
        "--from", "2024-01-02T00:00:00Z", "--horizon", "4", "--out", s(&f96)], 1);

    // evaluation on the test split
    let report = dir.path().join("r.json");
    let plots = dir.path().join("plots");
    let cfg = dir.path().join("desk.json");
    ok(&["eval", "--model", s(&ck), "--data", s(&data), "--config", s(&cfg), "--horizon", "96",
        "--anchors", "1", "--report", s(&report), "--plot-dir", s(&plots)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let per = r["per_carrier"].as_array().unwrap();
    assert_eq!(per.len(), 3);
    for c in per {
        let hit = c["hit_prob"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&hit));
        assert!(c["mae"].as_f64().unwrap() >= 0.0);
        assert_eq!(c["horizon"], 96);
    }
    for key in ["mean_mae", "mae_std", "mean_hit_prob"] {
        assert!(r["aggregate"][key].is_f64(), "{key}");
    }
    assert_eq!(r["metadata"]["model_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["metadata"]["data_start"], "2024-01-26T00:00:00Z");
    for c in 0..3 {
        let svg = std::fs::read_to_string(plots.join(format!("carrier_{c:02}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }

    // --anchors 1 is the single trajectory from the first admissible anchor
    let series = load_csv(&data).unwrap();
    let test = chronological_split(&series, rupformer_core::kpi::SplitPlan::Steps { train: 1920, val: 480, test: 480 }, 1)
        .unwrap()
        .test;
    for (c, s) in per.iter().zip(&test) {
        let t = trajectory(&loaded.model, &loaded.normalizer, s, 4, 96).unwrap();
        assert_eq!(c["mae"].as_f64().unwrap(), t.mae().unwrap());
        assert_eq!(c["hit_prob"].as_f64().unwrap(), t.hit_probability().unwrap());
    }

    let again = dir.path().join("r2.json");
    ok(&["eval", "--model", s(&ck), "--data", s(&data), "--config", s(&cfg), "--horizon", "96",
        "--anchors", "1", "--report", s(&again)]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());
}
