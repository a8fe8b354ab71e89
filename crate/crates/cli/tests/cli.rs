use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use promptseg::config::{ModelConfig, RunConfig};
use promptseg::datamodel::build_index;
use promptseg::metrics::{ScoreRow, ScoreTable};
use serde_json::Value;

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = promptseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(root: &Path, modalities: &str, per: usize, seed: u64) {
    ok(&[
        "gen-synthetic",
        "--out",
        p(root),
        "--modalities",
        modalities,
        "--cases-per-modality",
        &per.to_string(),
        "--size",
        "32",
        "--seed",
        &seed.to_string(),
    ]);
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

/// Micro model, two steps: fast enough for an end-to-end run.
fn micro_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::micro();
    cfg.sampling.batch_size = 2;
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(2);
    let path = dir.join("micro.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

fn train(dir: &Path, data: &Path, extra: &[&str]) -> std::path::PathBuf {
    let cfg = micro_config(dir);
    let out = dir.join("run");
    let mut args = vec!["train", "--config", p(&cfg), "--data-root", p(data), "--out", p(&out), "--seed", "5"];
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    assert!(stdout.contains("checkpoint"), "{stdout}");
    out
}

#[test]
fn gen_synthetic_writes_containers_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    gen(&a, "CT,MR,XRay", 4, 11);
    let all = files(&a);
    assert_eq!(all.iter().filter(|(n, _)| n.ends_with(".npz")).count(), 12);
    assert!(all.iter().any(|(n, _)| n == "manifest.json"));

    let b = dir.path().join("b");
    gen(&b, "CT,MR,XRay", 4, 11);
    assert_eq!(files(&a), files(&b));
    let c = dir.path().join("c");
    gen(&c, "CT,MR,XRay", 4, 12);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn challenge_imbalance_skews_slices_toward_ct() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-synthetic",
        "--out",
        p(dir.path()),
        "--modalities",
        "CT,MR,PET,XRay",
        "--cases-per-modality",
        "3",
        "--size",
        "16",
        "--imbalance",
        "challenge",
    ]);
    let index = build_index(dir.path()).unwrap();
    let counts = index.slice_counts();
    let ratio = counts[0] as f64 / counts[1] as f64;
    assert!((ratio - 76.0 / 13.0).abs() / (76.0 / 13.0) < 0.1, "CT:MR slices {counts:?}");
}

#[test]
fn gen_synthetic_rejects_unknown_imbalance() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptseg(&["gen-synthetic", "--out", p(dir.path()), "--imbalance", "steep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "CT,XRay", 1, 2);
    let run = train(dir.path(), &data, &[]);
    let ckpt = run.join("checkpoint_epoch000.safetensors");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data-root", p(&data), "--out", p(&eval_dir)]);
    let table = ScoreTable::read_csv(&eval_dir.join("scores.csv")).unwrap();
    assert!(!table.rows.is_empty());
    let agg: Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("aggregate.json")).unwrap()).unwrap();

    // Hand-computed protocol: mean per modality, then mean and population
    // std over the modality means.
    let mut per: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for r in &table.rows {
        per.entry(r.modality.as_str()).or_default().push(r.dsc);
    }
    let means: Vec<f64> = per.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
    assert!((agg["overall"]["dsc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((agg["overall"]["dsc"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
    for (m, v) in &per {
        assert_eq!(agg["per_modality"][m]["n"].as_u64().unwrap() as usize, v.len());
    }

    let pred_dir = dir.path().join("pred");
    let stdout = ok(&["infer", "--checkpoint", p(&ckpt), "--data-root", p(&data), "--out", p(&pred_dir)]);
    assert!(stdout.contains("wrote 2 predictions"), "{stdout}");
    assert_eq!(walk(&pred_dir).len(), 2);
}

#[test]
fn train_resolves_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "CT,XRay", 1, 2);
    let run = train(dir.path(), &data, &["--prompt.use_cnn_encoder=false", "--sampling.strategy", "case"]);
    assert!(run.join("checkpoint_epoch000.safetensors").is_file());
    let saved: RunConfig = toml::from_str(&std::fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert!(!saved.prompt.use_cnn_encoder);
    assert!(!saved.model.prompt.use_cnn_encoder);
    assert_eq!(saved.sampling.strategy.to_string(), "case");
    assert_eq!(saved.sampling.seed, 5);
    assert_eq!(saved.model.num_modalities, 2);
}

#[test]
fn invalid_strategy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    for bad in [
        vec!["--sampling.strategy", "bogus"],
        vec!["--sampling.strategy=bogus"],
        vec!["--sampling.no_such_key=1"],
        vec!["--model.patch_size=5"],
    ] {
        let mut args = vec!["train", "--config", p(&cfg), "--data-root", p(dir.path())];
        args.extend(bad.iter().copied());
        let out = promptseg(&args);
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn eval_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "CT,MR,XRay", 2, 4);
    let out = dir.path().join("eval");
    ok(&["eval", "--gt-as-pred", "--data-root", p(&data), "--out", p(&out), "--nsd-tolerance", "1"]);
    let table = ScoreTable::read_csv(&out.join("scores.csv")).unwrap();
    assert!(table.rows.len() > 6);
    assert!(table.rows.iter().all(|r| r.dsc == 1.0 && r.nsd == 1.0));
    let agg: Value = serde_json::from_str(&std::fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["overall"]["dsc"]["mean"], 1.0);
    assert_eq!(agg["overall"]["nsd"]["std"], 0.0);
    assert_eq!(agg["per_modality"].as_object().unwrap().len(), 3);
}

#[test]
fn eval_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "CT", 1, 0);
    let out = promptseg(&["eval", "--checkpoint", p(&dir.path().join("none.safetensors")), "--data-root", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert_ne!(promptseg(&["eval", "--data-root", p(&data)]).status.code(), Some(0));
}

fn table(rows: &[(&str, f64, f64)]) -> ScoreTable {
    ScoreTable {
        rows: rows
            .iter()
            .map(|&(id, dsc, nsd)| ScoreRow { case_id: id.into(), modality: "CT".into(), dsc, nsd })
            .collect(),
    }
}

#[test]
fn report_runs_paired_tests() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let base: Vec<(&str, f64, f64)> = ["c1", "c2", "c3", "c4", "c5", "c6"].iter().map(|&c| (c, 0.5, 0.5)).collect();
    table(&base).write_csv(&a).unwrap();

    table(&base).write_csv(&b).unwrap();
    let stdout = ok(&["report", "--scores-a", p(&a), "--scores-b", p(&b)]);
    assert!(stdout.contains("dsc: insufficient pairs"), "{stdout}");

    // Six differences, all positive, with distinct magnitudes: W- = 0 and the
    // exact two-sided p is 2 / 2^6.
    let shifted: Vec<(&str, f64, f64)> = base
        .iter()
        .enumerate()
        .map(|(i, &(c, d, n))| (c, d + 0.01 * (i + 1) as f64, n + 0.01 * (i + 1) as f64))
        .collect();
    table(&shifted).write_csv(&b).unwrap();
    let stdout = ok(&["report", "--scores-a", p(&b), "--scores-b", p(&a)]);
    assert!(stdout.contains("dsc: n=6 W+=21 W-=0 p=0.03125 (exact)"), "{stdout}");
    assert!(stdout.contains("nsd: n=6"), "{stdout}");

    let mut renamed = shifted.clone();
    renamed[3].0 = "other";
    table(&renamed).write_csv(&b).unwrap();
    let out = promptseg(&["report", "--scores-a", p(&a), "--scores-b", p(&b)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("case_id"));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_on_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "CT,MR,XRay", 1, 0);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(["serve", "--data-root", p(&data), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let started = Instant::now();
    let body = loop {
        if let Some(r) = http_get(port, "/api/modalities") {
            break r;
        }
        assert!(started.elapsed() < Duration::from_secs(30), "server did not come up");
        std::thread::sleep(Duration::from_millis(100));
    };
    let cases = http_get(port, "/api/cases").unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains(r#""name":"MR""#), "{body}");
    assert_eq!(cases.matches("case_id").count(), 3, "{cases}");
}

#[test]
fn serve_refuses_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptseg(&["serve", "--data-root", p(dir.path()), "--port", "0"]);
    assert!(!out.status.success());
}
