use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn keepcore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keepcore")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "seed": 3,
  "synth": { "image_size": 32, "token_size": 8, "count": 10 },
  "oracle": { "hidden": [4] },
  "sage": { "token_size": 8, "steps": 10 },
  "augment": { "kind": "cutout" },
  "training": { "epochs": 1, "batch": 4 }
}"#;

#[test]
fn sage_help_lists_epsilon_default() {
    let o = keepcore(&["sage", "--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("--epsilon"));
    assert!(text.contains("0.05"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["synth", "train-oracle", "sage", "keep-aug", "train", "eval", "render"] {
        assert_eq!(code(&keepcore(&[sub, "--help"])), 0, "{sub}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let o = keepcore(&["synth"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
    assert_eq!(code(&keepcore(&["synth", "--config", "c.json", "--bogus"])), 1);
    assert_eq!(code(&keepcore(&["train", "--config", "c.json", "--mode", "sideways"])), 1);
    assert_eq!(code(&keepcore(&[])), 1);
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&keepcore(&["synth", "--config", missing.to_str().unwrap()])), 2);
    let cfg = write_config(dir.path(), r#"{ "unknown_key": 1 }"#);
    assert_eq!(code(&keepcore(&["synth", "--config", &cfg])), 2);
    let cfg = write_config(dir.path(), r#"{ "keep": { "tau_core": 1.5 } }"#);
    assert_eq!(code(&keepcore(&["synth", "--config", &cfg])), 2);
}

#[test]
fn keep_core_without_maps_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&keepcore(&["synth", "--config", &cfg, "--out", out])), 0);
    let o = keepcore(&["train", "--config", &cfg, "--out", out, "--mode", "keep_core"]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new(out).join("train_keep_core").exists());
}

#[test]
fn small_pipeline_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_path = dir.path().join("run");
    let out = out_path.to_str().unwrap();
    let base = ["--config", &cfg, "--out", out];
    let with = |sub: &str, extra: &[&str]| {
        let mut args = vec![sub];
        args.extend(base);
        args.extend(extra);
        keepcore(&args)
    };

    assert_eq!(code(&with("synth", &[])), 0);
    assert!(out_path.join("data/manifest.json").exists());

    // One epoch on ten images stays under the Dice gate: distinct exit code,
    // weights still written.
    let o = with("train-oracle", &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out_path.join("oracle.kco").exists());

    assert_eq!(code(&with("sage", &["--workers", "2", "--epsilon", "0.1"])), 0);
    let index = std::fs::read_to_string(out_path.join("maps/index.json")).unwrap();
    assert!(index.contains("\"epsilon\": 0.1"));
    assert_eq!(std::fs::read_dir(out_path.join("maps")).unwrap().count(), 11);

    assert_eq!(code(&with("keep-aug", &["--workers", "2"])), 0);
    assert!(out_path.join("keep/audit.json").exists());
    assert!(out_path.join("keep/images/s0009.kct").exists());

    for mode in ["baseline_aug", "keep_core"] {
        let o = with("train", &["--mode", mode]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out_path.join(format!("train_{mode}/report.csv"))).unwrap();
        assert!(csv.starts_with("class,dice,hd95,asd,iou"));
    }

    let weights = out_path.join("train_keep_core/model.kco");
    let o = with("eval", &["--weights", weights.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    // Evaluation reproduces the held-out report of the training run.
    assert_eq!(
        std::fs::read_to_string(out_path.join("eval/metrics.csv")).unwrap(),
        std::fs::read_to_string(out_path.join("train_keep_core/report.csv")).unwrap()
    );

    let map = out_path.join("maps/s0000.kcw");
    let pgm = out_path.join("w.pgm");
    assert_eq!(code(&keepcore(&["render", "--map", map.to_str().unwrap(), "--out", pgm.to_str().unwrap()])), 0);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n32 32\n255\n"));
    let ppm = out_path.join("w.ppm");
    let img = out_path.join("data/images/s0000.kct");
    let args = ["render", "--map", map.to_str().unwrap(), "--image", img.to_str().unwrap(), "--out", ppm.to_str().unwrap()];
    assert_eq!(code(&keepcore(&args)), 0);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n32 32\n255\n"));
}

#[test]
fn render_rejects_mismatched_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "synth": { "image_size": 32, "token_size": 8 } }"#);
    let out = dir.path().join("run");
    assert_eq!(code(&keepcore(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--count", "1"])), 0);
    let map = dir.path().join("w.kcw");
    let grid = keepcore::Tensor::full(&[2, 2], 0.5);
    keepcore::ImportanceMap::new(grid, 4, "s", "o").unwrap().save(&map).unwrap();
    let img = out.join("data/images/s0000.kct");
    let o = keepcore(&[
        "render",
        "--map",
        map.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--out",
        dir.path().join("x.ppm").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_flag_changes_data_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = keepcore(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed, "--count", "2"]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("data/images/s0001.kct")).unwrap()
    };
    assert_eq!(run("a", "5"), run("b", "5"));
    assert_ne!(run("a", "5"), run("c", "6"));
}

/// The shipped defaults end to end on one core.
#[test]
fn default_pipeline_finishes_in_ten_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let out_path = dir.path().join("run");
    let out = out_path.to_str().unwrap();
    let t0 = Instant::now();
    for args in [
        vec!["synth"],
        vec!["train-oracle"],
        vec!["sage"],
        vec!["train", "--mode", "keep_core"],
    ] {
        let mut full = args.clone();
        full.extend(["--config", &cfg, "--out", out]);
        let o = keepcore(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let weights = out_path.join("train_keep_core/model.kco");
    let o = keepcore(&["eval", "--config", &cfg, "--out", out, "--weights", weights.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
}
