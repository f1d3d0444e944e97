use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use xgait::harness::PipelineConfig;

fn xgait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xgait"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xgait(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Desk preset shrunk so a full train/eval cycle takes seconds.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig::desk();
    cfg.vision.n_i = 32;
    cfg.vision.encoder_depth = 1;
    cfg.vision.decoder_depth = 1;
    cfg.fusion.n_sa = 1;
    for s in [
        &mut cfg.train.mae,
        &mut cfg.train.ts,
        &mut cfg.train.fusion,
        &mut cfg.train.head,
        &mut cfg.train.concat,
    ] {
        s.epochs = 2;
    }
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.display().to_string()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--seed",
            "7",
            "--samples-per-cell",
            "1",
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 201);
    assert_eq!(fa, fb);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = xgait(&["fly"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(xgait(&["eval"]).status.code(), Some(1));
}

#[test]
fn missing_prerequisite_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--seed",
        "1",
        "--samples-per-cell",
        "1",
        "--out",
        data.to_str().unwrap(),
    ]);
    let out = xgait(&[
        "train",
        "fusion",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        tmp.path().join("ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prerequisite"));
}

#[test]
fn train_eval_label_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let log = tmp.path().join("log");
    let (data, ckpt, log) = (
        data.to_str().unwrap(),
        ckpt.to_str().unwrap(),
        log.to_str().unwrap(),
    );

    ok(&[
        "synth",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--samples-per-cell",
        "2",
        "--out",
        data,
    ]);
    let labels = ok(&["label", "--data", data]);
    assert_eq!(labels.lines().count(), 6);
    assert!(labels.contains("vegetation\t0.30"));

    let trained = ok(&[
        "train",
        "all",
        "--config",
        &cfg,
        "--data",
        data,
        "--checkpoint",
        ckpt,
        "--seed",
        "3",
    ]);
    for stage in ["mae", "ts", "fusion", "head", "concat"] {
        assert!(
            Path::new(ckpt).join(format!("{stage}.cgw")).exists(),
            "{stage}"
        );
        assert!(trained.contains(stage));
    }
    assert!(!trained.contains("CHANGED"));

    let table = ok(&["eval", "--data", data, "--checkpoint", ckpt, "--seed", "3"]);
    let rows: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(
        rows,
        ["full", "w/o vision", "w/o proprioception", "mlp fusion"]
    );
    assert_eq!(
        table,
        ok(&["eval", "--data", data, "--checkpoint", ckpt, "--seed", "3"])
    );

    ok(&[
        "synth",
        "--traverse",
        "--config",
        &cfg,
        "--seconds",
        "1.5",
        "--seed",
        "4",
        "--out",
        log,
    ]);
    let trace = ok(&["infer", "--data", log, "--checkpoint", ckpt]);
    let gaits: Vec<(f64, f64)> = trace
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split('\t').map(|x| x.parse().unwrap()).collect();
            (v[3], v[4])
        })
        .collect();
    assert!(gaits.len() > 100);
    for w in gaits.windows(2) {
        assert!((w[1].0 - w[0].0).abs() <= 0.01 + 1e-5, "{w:?}");
        assert!((w[1].1 - w[0].1).abs() <= 0.01 + 1e-5, "{w:?}");
    }
}

#[test]
fn bench_reports_throughput() {
    let out = ok(&["bench", "--preset", "desk", "--iterations", "30"]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "desk");
    assert!(row[3].parse::<f64>().unwrap() > 0.0);
}
