use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# tiny end-to-end configuration
synth.n_train = 6
synth.n_val = 2
synth.n_test = 4
synth.min_seconds = 8
synth.max_seconds = 12
train.epochs = 2
train.batch_size = 4
train.window_seconds = 3
train.d_model = 8
train.layers = 1
train.heads = 2
train.ff_mult = 2
train.token_layers = 1
train.token_heads = 2
";

fn mmfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes the config and a generated dataset; returns (config, manifest).
fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let out = mmfuse(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    (s(&cfg).to_string(), s(&data.join("manifest.tsv")).to_string())
}

#[test]
fn gen_train_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let run = dir.path().join("run");
    let out = mmfuse(&["train", "--config", &cfg, "--manifest", &manifest, "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["history.tsv", "final.ckpt", "best.ckpt", "train.log"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(run.join("history.tsv")).unwrap();
    assert!(history.starts_with("epoch\tstep\tlr\ttrain_loss\tval_f1\n"));
    assert_eq!(history.lines().count(), 3);

    let eval = dir.path().join("eval");
    let out = mmfuse(&[
        "eval", "--config", &cfg, "--manifest", &manifest, "--checkpoint", s(&run), "--out", s(&eval), "--n-prime", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("f1\t"));
    for f in ["metrics.tsv", "predictions.tsv", "window_predictions.tsv", "prefix_predictions.tsv", "prefix_metrics.tsv"] {
        assert!(eval.join(f).is_file(), "missing {f}");
    }
    let predictions = std::fs::read_to_string(eval.join("predictions.tsv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 4);
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = mmfuse(&["train", "--config", &cfg, "--manifest", &manifest, "--out", s(d), "--threads", "1"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["history.tsv", "final.ckpt", "best.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn multi_run_training_and_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let runs = dir.path().join("runs");
    let out = mmfuse(&["train", "--config", &cfg, "--manifest", &manifest, "--out", s(&runs), "--runs", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = mmfuse(&["eval", "--config", &cfg, "--manifest", &manifest, "--checkpoint", s(&runs), "--runs", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(runs.join("metrics.tsv")).unwrap();
    let summary = mmfuse::evaluation::parse_metrics(&text).unwrap();
    let f1: Vec<f64> = (0..3)
        .map(|i| {
            let t = std::fs::read_to_string(runs.join(format!("run_{i}/metrics.tsv"))).unwrap();
            mmfuse::evaluation::parse_metrics(&t).unwrap().into_iter().find(|m| m.name == "f1").unwrap().mean
        })
        .collect();
    let mean = f1.iter().sum::<f64>() / 3.0;
    let std = (f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let agg = summary.iter().find(|m| m.name == "f1").unwrap();
    assert!((agg.mean - mean).abs() < 1e-12 && (agg.std - std).abs() < 1e-12);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = mmfuse(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).to_lowercase().contains("usage"));
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let missing = dir.path().join("nowhere.ckpt");
    let out = mmfuse(&["eval", "--config", &cfg, "--manifest", &manifest, "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere.ckpt"), "{}", stderr(&out));
    assert_eq!(stderr(&out).trim().lines().count(), 1);
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(dir.path());
    let run = dir.path().join("run");
    assert_eq!(mmfuse(&["train", "--config", &cfg, "--manifest", &manifest, "--out", s(&run)]).status.code(), Some(0));
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, SMALL.replace("train.d_model = 8", "train.d_model = 12")).unwrap();
    let out = mmfuse(&["eval", "--config", s(&other), "--manifest", &manifest, "--checkpoint", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("configuration"), "{}", stderr(&out));
}

#[test]
fn bad_configs_exit_with_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [("train.heads = 3\n", "heads"), ("train.epoch = 3\n", "train.epoch"), ("\ntrain.lr = fast\n", "line 2")] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, text).unwrap();
        let out = mmfuse(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(stderr(&out).contains(needle), "{text}: {}", stderr(&out));
    }
}

#[test]
fn inspect_prints_header_and_presence() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let file = dir.path().join("data/train_0000/face.mmds");
    let out = mmfuse(&["inspect", s(&file)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rate\t25"));
    assert!(text.contains("dim\t16"));
    assert!(text.contains("presence_ratio\t"));

    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 3]).unwrap();
    let out = mmfuse(&["inspect", s(&file)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let out = mmfuse(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("pass"));
    let out = mmfuse(&["gradcheck", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1));
}
