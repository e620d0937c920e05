use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
pattern_depth = 1

[model.echelon]
stage_widths = [4, 8, 8, 8]
embed_dim = 8

[task]
ways = 2
shots = 1
queries = 2
image_size = [8, 8]

[train]
iterations = 3
"#;

fn colorsense(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorsense"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn with_config() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.toml", "--synthetic", "--out", out];
    args.extend_from_slice(extra);
    colorsense(dir, &args)
}

#[test]
fn help_exits_zero_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "eval", "distill", "plot", "convert-check"] {
        let out = colorsense(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("Usage"));
    }
    assert_eq!(code(&colorsense(dir.path(), &["--help"])), 0);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_two() {
    let dir = with_config();
    let missing_source = colorsense(dir.path(), &["train", "--config", "tiny.toml", "--out", "run"]);
    assert_eq!(code(&missing_source), 2);
    assert!(stderr(&missing_source).contains("--synthetic"));
    assert_eq!(code(&colorsense(dir.path(), &["train", "--synthetic"])), 2);
    assert_eq!(code(&colorsense(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&train(dir.path(), "run", &["--depth", "0"])), 2);
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = with_config();
    let a = train(dir.path(), "a", &["--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    for f in ["manifest.json", "model.ckpt", "metrics.jsonl"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    assert_eq!(code(&train(dir.path(), "b", &["--seed", "7"])), 0);
    let read = |run: &str, f: &str| fs::read(dir.path().join(run).join(f)).unwrap();
    assert_eq!(read("a", "metrics.jsonl"), read("b", "metrics.jsonl"));
    assert_eq!(read("a", "model.ckpt"), read("b", "model.ckpt"));
    assert_eq!(fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap().lines().count(), 3);

    // The manifest alone reproduces the run.
    let again = colorsense(dir.path(), &["train", "--config", "a/manifest.json", "--out", "c"]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(read("a", "metrics.jsonl"), read("c", "metrics.jsonl"));

    let manifest: serde_json::Value = serde_json::from_slice(&read("a", "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["train"]["learning_rate"], 1e-3);
    assert_eq!(manifest["config"]["task"]["ways"], 2);
}

#[test]
fn eval_reports_chance_when_images_carry_no_signal() {
    let dir = with_config();
    // Every class holds the same gray image, so no model can beat 1/K.
    for c in 0..5 {
        let class = dir.path().join("flat").join(format!("c{c}"));
        fs::create_dir_all(&class).unwrap();
        for i in 0..4 {
            image::RgbImage::from_pixel(8, 8, image::Rgb([120, 120, 120]))
                .save(class.join(format!("{i}.png")))
                .unwrap();
        }
    }
    let init = train(dir.path(), "init", &["--iters", "0", "--ways", "5", "--queries", "3"]);
    assert_eq!(code(&init), 0, "{}", stderr(&init));
    let out = colorsense(
        dir.path(),
        &["eval", "--checkpoint", "init/model.ckpt", "--dataset", "flat", "--episodes", "30", "--out", "ev"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "20.00 ± 0.00");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes_evaluated"], 30);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("ev/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["eval_episodes"], 30);
    assert_eq!(manifest["command"], "eval");
}

#[test]
fn eval_defaults_to_six_hundred_episodes() {
    let dir = with_config();
    assert_eq!(code(&train(dir.path(), "m", &["--iters", "0"])), 0);
    let out = colorsense(dir.path(), &["eval", "--checkpoint", "m/model.ckpt", "--synthetic", "--out", "ev"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out);
    let (mean, ci) = line.trim().split_once(" ± ").expect("mean ± ci");
    assert!(mean.parse::<f64>().is_ok() && ci.parse::<f64>().is_ok());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes_evaluated"], 600);
}

#[test]
fn eval_and_distill_fail_on_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let eval = colorsense(dir.path(), &["eval", "--checkpoint", "nope.ckpt", "--synthetic"]);
    assert_eq!(code(&eval), 1);
    let distill = colorsense(dir.path(), &["distill", "--teacher", "nope.ckpt", "--synthetic", "--out", "s"]);
    assert_eq!(code(&distill), 1);
}

#[test]
fn distill_produces_a_student() {
    let dir = with_config();
    assert_eq!(code(&train(dir.path(), "teacher", &[])), 0);
    let ok = colorsense(
        dir.path(),
        &["distill", "--teacher", "teacher/model.ckpt", "--synthetic", "--depth", "2", "--gamma", "1e-4", "--iters", "2", "--out", "student"],
    );
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(dir.path().join("student/model.ckpt").is_file());
    let mismatch = colorsense(
        dir.path(),
        &["distill", "--teacher", "teacher/model.ckpt", "--synthetic", "--ways", "3", "--iters", "1", "--out", "bad"],
    );
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));
}

#[test]
fn plot_overlays_runs_reproducibly() {
    let dir = with_config();
    for (run, depth) in [("g1", "1"), ("g2", "2")] {
        assert_eq!(code(&train(dir.path(), run, &["--depth", depth, "--eval-every", "1", "--eval-episodes", "2"])), 0);
    }
    let args = ["plot", "g1/metrics.jsonl", "g2/metrics.jsonl", "--labels", "g=1,g=2", "--out"];
    let first = colorsense(dir.path(), &[&args[..], &["p1"]].concat());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(code(&colorsense(dir.path(), &[&args[..], &["p2"]].concat())), 0);
    for f in ["loss.svg", "accuracy.svg"] {
        let a = fs::read_to_string(dir.path().join("p1").join(f)).unwrap();
        assert!(a.contains("g=1") && a.contains("g=2"), "{f} lacks legend labels");
        assert_eq!(a, fs::read_to_string(dir.path().join("p2").join(f)).unwrap());
    }
}

#[test]
fn plot_rejects_empty_and_malformed_logs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let empty = colorsense(dir.path(), &["plot", "empty.jsonl", "--out", "p"]);
    assert_eq!(code(&empty), 1);
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"kind\":\"eval\",\"iteration\":1,\"accuracy\":0.5,\"ci95\":0.1,\"episodes\":2}\nnot json\n",
    )
    .unwrap();
    let bad = colorsense(dir.path(), &["plot", "bad.jsonl", "--out", "p"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));
    assert_eq!(code(&colorsense(dir.path(), &["plot", "--out", "p"])), 2);
}

#[test]
fn convert_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 50) as u8, (y * 60) as u8, 128]))
        .save(dir.path().join("tile.png"))
        .unwrap();
    let out = colorsense(dir.path(), &["convert-check", "--image", "tile.png", "--space", "hsv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("white -> L*a*b* 100.000000 0.000000 0.000000"), "{text}");
    assert!(text.contains("plane 2"));
    assert!(text.trim_end().ends_with("ok"));
}
