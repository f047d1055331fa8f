use std::path::Path;
use std::process::{Command, Output};

use pfxd::checkpoint::{checkpoint_bytes, load_checkpoint};
use pfxd::config::vocabulary_from_records;
use pfxd::data::{read_features, toy_encode_scene};
use pfxd::metrics::evaluate;
use pfxd::select::{Generator, ToyTextEncoder};
use pfxd::training::{checkpoint_meta, TrainConfig, TrainState};

fn pfxd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfxd"))
        .args(args)
        .env("PFXD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pfxd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--d1",
    "4",
    "--d2",
    "8",
    "--layers",
    "1",
    "--heads",
    "2",
    "--prefix-len",
    "2",
    "--diffusion-steps",
    "20",
    "--batch-size",
    "4",
];

fn train_tiny(dir: &Path, steps: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    if !data.exists() {
        ok(&[
            "gen-data",
            "--count",
            "3",
            "--seed",
            "5",
            "--out-dir",
            s(&data),
        ]);
    }
    let ck = dir.join(format!("tiny-{steps}.ckpt"));
    let feats = data.join("features.bin");
    let mut args = vec![
        "train",
        "--features",
        s(&feats),
        "--out",
        s(&ck),
        "--steps",
        steps,
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    ck
}

#[test]
fn gen_data_writes_one_record_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let msg = ok(&[
        "gen-data",
        "--count",
        "1",
        "--seed",
        "9",
        "--out-dir",
        s(&a),
    ]);
    assert!(msg.contains("1 records (5 captions)"));
    ok(&[
        "gen-data",
        "--count",
        "1",
        "--seed",
        "9",
        "--out-dir",
        s(&b),
    ]);
    for f in ["features.bin", "captions.tsv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let recs = read_features(&a.join("features.bin")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].captions.len(), 5);
    let tsv = std::fs::read_to_string(a.join("captions.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().all(|l| l.starts_with("scene-9\t")));
}

#[test]
fn dump_schedule_csv() {
    let out = ok(&["dump-schedule", "--kind", "linear", "--steps", "1"]);
    assert_eq!(out, "t,beta,alpha,alpha_bar\n1,0.01,0.99,0.99\n");
    let out = ok(&["dump-schedule", "--kind", "t-cosine", "--steps", "10"]);
    assert_eq!(out.lines().count(), 11);
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let out = pfxd(&["train", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`features`"));

    assert_eq!(
        pfxd(&["dump-schedule", "--kind", "quartic"]).status.code(),
        Some(1)
    );
    assert_eq!(pfxd(&["no-such-command"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"eval_step": 5}"#).unwrap();
    let out = pfxd(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval_step"));

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"PFXFEAT0garbage").unwrap();
    let ck = dir.path().join("x.ckpt");
    let out = pfxd(&["train", "--features", s(&bad), "--out", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_zero_steps_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "0");
    let loaded = load_checkpoint(&ck).unwrap();
    let records = read_features(&dir.path().join("data/features.bin")).unwrap();
    let vocab = vocabulary_from_records(&records).unwrap();
    let cfg = TrainConfig {
        model: loaded.meta.model.clone(),
        batch_size: 4,
        steps: 0,
        ..TrainConfig::default()
    };
    let init = TrainState::init(&cfg, vocab.len()).unwrap();
    let expect =
        checkpoint_bytes(&init.model, &init.emb, &checkpoint_meta(&cfg, &vocab, 0)).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), expect);
}

#[test]
fn train_reports_losses_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "30");
    let bytes = std::fs::read(&a).unwrap();
    std::fs::remove_file(&a).unwrap();
    let b = train_tiny(dir.path(), "30");
    assert_eq!(std::fs::read(&b).unwrap(), bytes);
    let log = std::fs::read_to_string(dir.path().join("tiny-30.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&losses[25..]) < mean(&losses[..5]), "{losses:?}");
}

#[test]
fn sample_and_eval_agree_with_library() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "5");
    let feats = dir.path().join("data/features.bin");
    let one = ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--features",
        s(&feats),
        "--id",
        "scene-6",
        "--n",
        "1",
        "--eval-steps",
        "5",
    ]);
    let lines: Vec<&str> = one.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "scene-6");
    assert!(lines[1].starts_with("*  0 "));

    let args = [
        "sample",
        "--checkpoint",
        s(&ck),
        "--features",
        s(&feats),
        "--n",
        "4",
        "--eval-steps",
        "5",
        "--seed",
        "3",
    ];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert_eq!(first.lines().filter(|l| l.starts_with('*')).count(), 3);

    let report = dir.path().join("report.json");
    let caps = dir.path().join("caps.tsv");
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--features",
        s(&feats),
        "--n",
        "4",
        "--eval-steps",
        "5",
        "--seed",
        "3",
        "--report",
        s(&report),
        "--captions-out",
        s(&caps),
        "--per-image",
    ]);
    assert!(table.contains("B@1"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["records"], 3);
    assert_eq!(json["n_candidates"], 4);

    let gen = Generator::from_checkpoint(load_checkpoint(&ck).unwrap()).unwrap();
    let records = read_features(&feats).unwrap();
    let ev = evaluate(&gen, &records, 4, 5, 3, &ToyTextEncoder, true).unwrap();
    let tsv = std::fs::read_to_string(&caps).unwrap();
    for ((line, r), sel) in tsv.lines().zip(&records).zip(&ev.selected) {
        assert_eq!(line, format!("{}\t{}", r.id, sel));
    }
    // the chosen line of `sample` carries the same caption
    for (block, sel) in first.split("scene-").skip(1).zip(&ev.selected) {
        let chosen = block.lines().find(|l| l.starts_with('*')).unwrap();
        assert!(chosen.ends_with(sel.as_str()), "{chosen:?} vs {sel:?}");
    }
    assert_eq!(json["bleu1"].as_f64().unwrap(), ev.report.bleu1);
    assert!(toy_encode_scene(&pfxd::data::gen_scene(5)).len() == records[0].feat.len());
}

#[test]
fn parameterization_flags_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "2", "--seed", "1", "--out-dir", s(&data)]);
    let feats = data.join("features.bin");
    let ck = dir.path().join("start.ckpt");
    let mut args = vec!["train", "--features", s(&feats), "--out", s(&ck), "--steps", "2", "--tuned", "--rounding", "clean"];
    args.extend_from_slice(TINY);
    ok(&args);
    let loaded = load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.meta.parameterization, pfxd::diffusion::Parameterization::Start);

    let noise = dir.path().join("noise.ckpt");
    let mut args = vec!["train", "--features", s(&feats), "--out", s(&noise), "--steps", "2", "--tuned", "--parameterization", "noise"];
    args.extend_from_slice(TINY);
    ok(&args);
    assert_eq!(load_checkpoint(&noise).unwrap().meta.parameterization, pfxd::diffusion::Parameterization::Noise);

    let mut args = vec!["train", "--features", s(&feats), "--out", s(&noise), "--parameterization", "velocity"];
    args.extend_from_slice(TINY);
    assert_eq!(pfxd(&args).status.code(), Some(1));
}
