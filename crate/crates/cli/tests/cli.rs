use std::path::Path;
use std::process::{Command, Output};

fn typhoon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_typhoon"))
        .args(args)
        .env_remove("TYPHOON_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .expect("spawn typhoon")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL: &[&str] = &[
    "--synth.n=160",
    "--synth.sentiment_examples=200",
    "--synth.bayes_samples=1000",
    "--embedding.d=8",
    "--extractor.units=6",
    "--training.epochs=2",
    "--importance.repeats=1",
];

fn stage(dir: &Path, name: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![name, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    typhoon(dir, &args)
}

fn write_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let cfg = typhoon(dir, &[&["config"][..], SMALL, &[&format!("--paths.output_dir={out}")]].concat());
    let path = dir.join("run.json");
    std::fs::write(&path, stdout_json(&cfg).to_string()).unwrap();
    path
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run");
    let synth = stdout_json(&stage(tmp.path(), "synth", &cfg, &[]));
    assert!(synth["bayes_combined"].as_f64().unwrap() > 0.5);
    let pre = stdout_json(&stage(tmp.path(), "preprocess", &cfg, &[]));
    assert_eq!(pre["observations"], 160);
    stdout_json(&stage(tmp.path(), "embed", &cfg, &[]));
    let train = stdout_json(&stage(tmp.path(), "train", &cfg, &[]));
    assert_eq!(train["epoch"], 2);
    let eval = stdout_json(&stage(tmp.path(), "evaluate", &cfg, &[]));
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["f1_micro"].as_f64().unwrap(), acc);

    let run = tmp.path().join("run");
    for f in [
        "synth/besttrack.csv",
        "synth/ground_truth.json",
        "preprocess/slots.jsonl",
        "preprocess/pairing_report.json",
        "embed/embeddings.txt",
        "train/extractor.ckpt",
        "train/classifier.ckpt",
        "train/training.csv",
        "evaluate/metrics.csv",
        "evaluate/confusion.csv",
        "evaluate/importance.csv",
        "evaluate/timeseries.csv",
        "evaluate/config.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("evaluate/metrics.csv")).unwrap();
    assert!(metrics.starts_with("scope,precision,recall,f1,support\nTD,"));
}

#[test]
fn standalone_mode_has_no_extractor_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run");
    for s in ["synth", "preprocess", "embed"] {
        stdout_json(&stage(tmp.path(), s, &cfg, &[]));
    }
    stdout_json(&stage(tmp.path(), "train", &cfg, &["--training.mode=standalone_env_only"]));
    let csv = std::fs::read_to_string(tmp.path().join("run/train/training.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "l_f1").expect("l_f1 column");
    for line in lines {
        assert_eq!(line.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
    }
    assert!(!tmp.path().join("run/train/extractor.ckpt").exists());
}

#[test]
fn errors_are_json_on_stderr_with_failure_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = typhoon(tmp.path(), &["train", "--paths.output_dir=nowhere"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"].is_string());
    assert!(err["message"].is_string());

    let out = typhoon(tmp.path(), &["config", "--no.such.key=1"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn missing_config_keys_are_all_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("partial.json");
    std::fs::write(&path, r#"{"seed": 1}"#).unwrap();
    let out = typhoon(tmp.path(), &["config", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    let msg = err["message"].as_str().unwrap();
    for key in ["paths", "split", "training", "classifier"] {
        assert!(msg.contains(key), "{key} not listed in {msg}");
    }
}

#[test]
fn environment_sets_output_dir_and_overrides_win() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |extra: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_typhoon"))
            .arg("config")
            .args(extra)
            .env("TYPHOON_OUTPUT_DIR", "from-env")
            .current_dir(tmp.path())
            .output()
            .unwrap();
        stdout_json(&out)
    };
    assert_eq!(run(&[])["paths"]["output_dir"], "from-env");
    assert_eq!(run(&["--paths.output_dir=from-flag"])["paths"]["output_dir"], "from-flag");
}

#[test]
fn malformed_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = typhoon(tmp.path(), &["config", "--training.epochs"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--key=value"));
}
