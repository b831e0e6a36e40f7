use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lapseg_core::data::{load_mask, save_mask, LabelMap, Manifest, ManifestEntry, Taxonomy};
use lapseg_core::metrics::MetricsReport;
use lapseg_core::synthetic;
use lapseg_core::train::{LogEvent, LogRecord};

const NARROW: &str = "8,16,32,64,128";

fn lapseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapseg")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &Path, count: usize, nc: usize) -> PathBuf {
    synthetic::write_dataset(dir, count, 64, nc, Taxonomy::Single9, 11).unwrap();
    dir.join("manifest.json")
}

fn records(log: &Path) -> (Vec<LogRecord>, Vec<LogEvent>) {
    let (mut r, mut e) = (Vec::new(), Vec::new());
    for line in std::fs::read_to_string(log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("every log line is JSON");
        if v.get("event").is_some() {
            e.push(serde_json::from_value(v).unwrap());
        } else {
            r.push(serde_json::from_value(v).unwrap());
        }
    }
    (r, e)
}

#[test]
fn print_config_resolves_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"manifest": "m.json", "epochs": 5, "batch_size": 4}"#).unwrap();
    let out = ok(&lapseg(&["train", "--config", p(&cfg), "--epochs", "7", "--print-config"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["epochs"], 7);
    assert_eq!(v["batch_size"], 4);
    assert_eq!(v["initial_lr"], 1e-4);
    assert_eq!(v["lr_halving_period"], 10);
    assert_eq!(v["loss"], "dice");
    assert_eq!(v["task"], "train");
    let out = ok(&lapseg(&["pretrain", "--manifest", "m.json", "--print-config"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!((v["initial_lr"].as_f64(), v["batch_size"].as_u64(), v["loss"].as_str()), (Some(0.01), Some(64), Some("mse")));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = lapseg(&["pretrain", "--manifest", p(&empty)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty manifest"));

    assert_eq!(lapseg(&["train", "--manifest", "m.json", "--loss", "mse"]).status.code(), Some(2));
    assert_eq!(lapseg(&["train", "--bogus-flag"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_lapseg"))
        .args(["stats", "--manifest", p(&empty)])
        .env("LAPSEG_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 3);
    let out = lapseg(&["pretrain", "--manifest", p(&m), "--stats", p(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));
    // masks hold three classes; a two-class network cannot train on them
    let out = lapseg(&[
        "train", "--manifest", p(&m), "--num-classes", "2", "--augment", "false", "--image-size", "64",
        "--encoder-filters", NARROW, "--epochs", "1", "--log", p(&dir.path().join("log.jsonl")),
        "--checkpoint-out", p(&dir.path().join("x.lseg")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_transfer_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = dataset(&d.join("data"), 32, 3);
    let stats = d.join("stats.json");
    ok(&lapseg(&["stats", "--manifest", p(&m), "--stats", p(&stats)]));

    let (pre, prelog) = (d.join("pre.lseg"), d.join("pre.jsonl"));
    ok(&lapseg(&[
        "pretrain", "--manifest", p(&m), "--stats", p(&stats), "--image-size", "64", "--batch-size", "8",
        "--encoder-filters", NARROW, "--checkpoint-out", p(&pre), "--log", p(&prelog), "--deterministic",
    ]));
    assert!(pre.exists());
    let (recs, _) = records(&prelog);
    assert_eq!(recs.len(), 4);
    assert!(recs.last().unwrap().loss < recs[0].loss, "{recs:?}");
    assert!(recs.iter().all(|r| r.dice.is_none() && r.ts == 0.0));

    let (seg, seglog) = (d.join("seg.lseg"), d.join("seg.jsonl"));
    let train = |epochs: &str, from: &Path, nc: &str| {
        lapseg(&[
            "train", "--manifest", p(&m), "--stats", p(&stats), "--image-size", "64", "--augment", "false",
            "--encoder-filters", NARROW, "--num-classes", nc, "--batch-size", "16", "--epochs", epochs,
            "--checkpoint-in", p(from), "--checkpoint-out", p(&seg), "--log", p(&seglog),
        ])
    };
    ok(&train("11", &pre, "3"));
    let (recs, events) = records(&seglog);
    assert!(events.iter().any(|e| e.event == "transfer" && e.message == "transferred 9/10 layers"), "{events:?}");
    let lr = |epoch: u32| recs.iter().find(|r| r.epoch == epoch).unwrap().lr;
    assert_eq!(lr(9), 1e-4);
    assert_eq!(lr(10), 5e-5);
    assert!(recs.iter().all(|r| r.dice.is_some()));
    assert!(seg.exists());
    assert!(d.join("seg.epoch0010.lseg").exists());

    // resuming a segmentation checkpoint with another class count
    let out = train("12", &seg, "4");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("predicts 3 classes"));
    ok(&train("12", &seg, "3"));
    let (recs, events) = records(&seglog);
    assert!(events.iter().any(|e| e.event == "resume"));
    assert_eq!(recs.last().unwrap().epoch, 11);
}

fn train_small(d: &Path, m: &Path, ckpt: &Path) {
    ok(&lapseg(&[
        "train", "--manifest", p(m), "--image-size", "64", "--augment", "false", "--encoder-filters", NARROW,
        "--num-classes", "3", "--batch-size", "4", "--epochs", "2", "--checkpoint-out", p(ckpt),
        "--log", p(&d.join("train.jsonl")), "--deterministic",
    ]));
}

#[test]
fn eval_reports_are_complete_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = dataset(&d.join("data"), 4, 3);
    let ckpt = d.join("seg.lseg");
    train_small(d, &m, &ckpt);
    let eval = |out: &Path| {
        ok(&lapseg(&[
            "eval", "--manifest", p(&m), "--checkpoint-in", p(&ckpt), "--image-size", "64", "--num-classes", "3",
            "--out-dir", p(out), "--deterministic",
        ]))
    };
    eval(&d.join("a"));
    eval(&d.join("b"));
    for f in ["report.csv", "report.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(d.join("a/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().last().unwrap().starts_with("Mean,"));
    let report = MetricsReport::from_json(&std::fs::read_to_string(d.join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report.total_pixels, 4 * 64 * 64);
}

#[test]
fn predicted_masks_evaluate_perfectly_against_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = dataset(&d.join("data"), 4, 3);
    let ckpt = d.join("seg.lseg");
    train_small(d, &m, &ckpt);
    let pred = d.join("pred");
    ok(&lapseg(&["predict", "--manifest", p(&m), "--checkpoint-in", p(&ckpt), "--image-size", "64", "--out-dir", p(&pred)]));
    assert!(pred.join("000.pgm").exists() && pred.join("000.ppm").exists());
    ok(&lapseg(&[
        "eval", "--manifest", p(&pred.join("manifest.json")), "--checkpoint-in", p(&ckpt), "--image-size", "64",
        "--out-dir", p(&d.join("self")),
    ]));
    let report = MetricsReport::from_json(&std::fs::read_to_string(d.join("self/report.json")).unwrap()).unwrap();
    for c in &report.classes {
        if let Some(s) = c.scores {
            assert_eq!((s.iou, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0), "{c:?}");
        }
    }
}

#[test]
fn remap_merges_fluids_into_gallbladder() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let labels: Vec<u8> = (0..19u8).chain([16, 17, 16]).collect();
    let full = LabelMap::new(2, 11, Taxonomy::Full19, labels).unwrap();
    save_mask(&full, d.join("a.pgm"), None).unwrap();
    Manifest { entries: vec![ManifestEntry { image: "a.ppm".into(), mask: Some("a.pgm".into()) }] }
        .save(d.join("m.json"))
        .unwrap();
    ok(&lapseg(&["remap", "--manifest", p(&d.join("m.json")), "--out-dir", p(&d.join("out"))]));
    let single = load_mask(d.join("out/a.pgm"), Taxonomy::Single9, None).unwrap();
    let h = single.histogram();
    assert_eq!(h[3], 1 + 2 + 3, "gallbladder plus bile and blood");
    assert_eq!(h[1], 9);
    assert_eq!(h.iter().sum::<u64>(), 22);
    assert!(single.labels().iter().all(|&l| l < 9));
}

#[test]
fn gradcheck_reports_every_op() {
    let out = ok(&lapseg(&["gradcheck", "--scope", "layer"]));
    let reports: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 18);
    assert!(reports.iter().all(|r| r["passed"] == true && r["max_rel_error"].as_f64().unwrap() < 1e-4));
    let out = ok(&lapseg(&["gradcheck", "--scope", "model", "--encoder-filters", "4,8,8,8,8"]));
    assert!(out.lines().all(|l| l.contains(r#""passed":true"#)));
}
