mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{tiny_config, train_tiny, write_config};
use hyperrecon::io::{load_checkpoint, read_json, read_raw};
use hyperrecon::pipeline::checkpoint_test_set;
use hyperrecon_core::evaluation::{landscape, Landscape, Metric};

fn hyperrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperrecon")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = hyperrecon(&["gen-data", "--count", "64", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 65);
    assert_eq!(fa, fb);
    let raw = read_raw(&a.join("phantoms.rec")).unwrap();
    assert_eq!(raw.len(), 64);
    assert_eq!(raw[0].1.shape(), &[64, 64]);

    let c = tmp.path().join("c");
    hyperrecon(&["gen-data", "--count", "64", "--seed", "8", "--out", c.to_str().unwrap()]);
    assert_ne!(files(&c), fa);
}

#[test]
fn dhs_with_supervised_loss_is_rejected() {
    let o = hyperrecon(&["train", "--sampling", "dhs", "--loss-mode", "sl"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("dhs") && err.contains("ao"), "{err}");
}

#[test]
fn invalid_config_file_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = hyperrecon(&["train", "--config", p.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("batch size"), "{err}");
}

#[test]
fn landscape_rejects_two_term_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(tmp.path(), false);
    let o = hyperrecon(&["landscape", "--checkpoint", ckpt.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("K=2"), "{}", stderr(&o));

    // the curve works on the same checkpoint
    let o = hyperrecon(&[
        "curve",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--n",
        "3",
        "--limit",
        "2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
}

#[test]
fn landscape_cli_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt_path = train_tiny(tmp.path(), true);
    let out = tmp.path().join("land");
    let o = hyperrecon(&[
        "landscape",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--n",
        "3",
        "--limit",
        "2",
        "--metric",
        "psnr",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let from_cli: Landscape = read_json(&out.join("landscape.json")).unwrap();
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    let test = checkpoint_test_set(&ckpt, Some(2)).unwrap();
    let direct = landscape(&ckpt.model().unwrap(), &test, Metric::Psnr, 3).unwrap();
    assert_eq!(from_cli, direct);
    assert_eq!(std::fs::read_to_string(out.join("landscape.csv")).unwrap().lines().count(), 10);
}

#[test]
fn train_resume_and_eval_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("full"), false);
    let cfg_path = write_config(&cfg, &tmp.path().join("run.json"));
    let c = cfg_path.to_str().unwrap();
    let o = hyperrecon(&["train", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));

    cfg.out = tmp.path().join("split");
    let split_cfg = write_config(&cfg, &tmp.path().join("split.json"));
    let s = split_cfg.to_str().unwrap();
    assert!(hyperrecon(&["train", "--config", s, "--epochs", "1"]).status.success());
    let ck = cfg.out.join("checkpoint.hrc");
    let o = hyperrecon(&["train", "--config", s, "--resume", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(tmp.path().join("full/checkpoint.hrc")).unwrap(), std::fs::read(&ck).unwrap());
    let log = std::fs::read_to_string(cfg.out.join("train.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let o = hyperrecon(&["eval", "--config", c, "--lambda", "0.25", "--limit", "3", "--save-images"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = read_json(&tmp.path().join("full/eval.json")).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 3);
    assert_eq!(report["lambda"], serde_json::json!([0.25]));
    assert!(tmp.path().join("full/eval/recon_0002.png").exists());

    let o = hyperrecon(&["eval", "--config", c, "--lambda", "1.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lambda[0]"), "{}", stderr(&o));

    let o = hyperrecon(&["diverse", "--config", c, "--image", "1", "--percentile", "50", "--n", "5", "--limit", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("full/diverse_1_a.png").exists());
}

#[test]
fn baseline_and_calibrate() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path(), false);
    cfg.task.kind = hyperrecon_core::forward::TaskKind::Denoise;
    let p = write_config(&cfg, &tmp.path().join("run.json"));
    let c = p.to_str().unwrap();
    let o = hyperrecon(&["train-baseline", "--config", c, "--lambda", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = load_checkpoint(&tmp.path().join("checkpoint.hrc")).unwrap();
    assert_eq!(ckpt.model().unwrap().lambda_dim(), 1);

    let o = hyperrecon(&["calibrate", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: hyperrecon_core::losses::ScalingFactors = read_json(&tmp.path().join("scaling.json")).unwrap();
    assert_eq!(s.best_losses.len(), 2);
    assert!(s.best_losses.iter().all(|&v| v > 0.0));

    let o = hyperrecon(&["calibrate", "--config", c, "--loss-mode", "ao"]);
    assert!(!o.status.success());
}
