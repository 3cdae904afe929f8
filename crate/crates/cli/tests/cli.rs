use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turncredit"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"seed = 7

[data]
train_size = 12
eval_size = 3

[model]
d_model = 8
n_layers = 1
n_heads = 1
d_ff = 8

[train]
group_size = 2
rollout_batch = 2
total_steps = 2
max_rounds_per_step = 1

[eval]
k = 1

[io]
data_dir = "{}"
out_dir = "{}"
"#,
        dir.join("data").display(),
        dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run(bin().arg("gen-data").arg("-c").arg(&cfg));
    assert!(dir.path().join("data/train.jsonl").exists());
    run(bin().args(["train", "--mode", "outcome_only", "-c"]).arg(&cfg));
    let run_dir = dir.path().join("run");
    for f in ["config.toml", "metrics.jsonl", "metrics.csv", "checkpoint.bin"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let echo = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(echo.contains("mode = \"outcome_only\""));
    assert!(echo.contains("eps_high"), "defaults are echoed");

    let out = run(bin().arg("eval").arg("-c").arg(&cfg));
    assert!(String::from_utf8_lossy(&out.stdout).contains("em="));
    assert!(run_dir.join("eval.json").exists());

    let out = run(bin().args(["trace", "--index", "1", "-c"]).arg(&cfg));
    let trace: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["turns"].as_array().unwrap().len(), 4);
    assert!(trace["turns"][0]["teacher_score"].is_number());
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run(bin().arg("gen-data").arg("-c").arg(&cfg));
    let mut streams = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        run(bin()
            .arg("train")
            .arg("-c")
            .arg(&cfg)
            .arg("--set")
            .arg(format!("io.out_dir=\"{}\"", out_dir.display())));
        streams.push(std::fs::read(out_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(streams[0], streams[1]);
}

#[test]
fn env_overrides_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run(bin().arg("gen-data").arg("-c").arg(&cfg));
    let elsewhere = dir.path().join("from-env");
    run(bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .args(["--set", "train.total_steps=1"])
        .env("TURNCREDIT_OUT_DIR", &elsewhere));
    assert!(elsewhere.join("metrics.jsonl").exists());
}

#[test]
fn invalid_config_exits_2_with_field() {
    let out = bin().args(["gen-data", "--set", "train.eps_low=0.9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.eps_high"));

    let out = bin().args(["gen-data", "--set", "model.bogus=3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = bin().args(["train", "--mode", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("train")
        .env("TURNCREDIT_DATA_DIR", dir.path().join("nothing"))
        .env("TURNCREDIT_OUT_DIR", dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("io.data_dir"));
}

#[test]
fn verify_theorem_reports_residual() {
    let out = run(bin().args(["verify-theorem", "--trials", "300"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("trials=300"), "{text}");
    let residual: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_residual="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual < 1e-9);
}
