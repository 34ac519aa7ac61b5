use std::path::Path;
use std::process::{Command, Output};

fn capture(args: &[&str], out_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_capture"));
    cmd.args(args).env_remove("CAPTURE_OUT");
    if let Some(root) = out_root {
        cmd.env("CAPTURE_OUT", root);
    }
    cmd.output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const TINY: &str = r#"
schema_version = 1
task = 1
episodes = 2
seeds = [3]
output_dir = "runs"
start_steps = 5
warmup = 8

[env]
episode_cap = 6

[td3]
batch_size = 8
actor_hidden = [8]
capture_critic_hidden = [8]
obstacle_critic_hidden = [8]
"#;

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn validate_reports_the_config() {
    let out = capture(&["validate", "--config", &shipped("task1.toml")], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["task"], 1);
    assert!(v["lambda_lim"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let v = error_json(&capture(&["validate", "--config", missing.to_str().unwrap()], None));
    assert_eq!(v["error"], "Io");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("schema_version = 1", "schema_version = 9")).unwrap();
    let v = error_json(&capture(&["validate", "--config", bad.to_str().unwrap()], None));
    assert_eq!(v["error"], "ConfigInvalid");
    assert!(v["message"].as_str().unwrap().contains("schema_version"));

    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let v = error_json(&capture(&["train", "--config", cfg.to_str().unwrap(), "--task", "2"], None));
    assert_eq!(v["error"], "ConfigInvalid");

    let ckpt = tmp.path().join("missing.bin");
    let v = error_json(&capture(
        &["eval", "--config", cfg.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()],
        None,
    ));
    assert_eq!(v["error"], "CheckpointMissing");

    let garbage = tmp.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let v = error_json(&capture(
        &["eval", "--config", cfg.to_str().unwrap(), "--ckpt", garbage.to_str().unwrap()],
        None,
    ));
    assert_eq!(v["error"], "CheckpointCorrupt");

    let csv = tmp.path().join("other.csv");
    std::fs::write(&csv, "a,b\n1,2\n").unwrap();
    let v = error_json(&capture(&["curves", "--metrics", csv.to_str().unwrap()], None));
    assert_eq!(v["error"], "SchemaMismatch");
}

#[test]
fn train_eval_and_curves_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let root = tmp.path().join("elsewhere");
    let out = capture(&["train", "--config", cfg.to_str().unwrap(), "--task", "1"], Some(&root));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // the environment variable replaces output_dir
    let run = root.join("seed_3");
    assert!(run.join("metrics.csv").exists() && !tmp.path().join("runs").exists());

    let ckpt = run.join("checkpoint_final.bin");
    let out = capture(
        &["eval", "--config", cfg.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--episodes", "2"],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["episodes"], 2);
    assert_eq!(report["mean_steps"], 6.0);

    let curves = tmp.path().join("curves");
    let metrics = run.join("metrics.csv");
    let out = capture(
        &[
            "curves",
            "--metrics",
            metrics.to_str().unwrap(),
            "--out",
            curves.to_str().unwrap(),
            "--interval",
            "1",
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let success = std::fs::read_to_string(curves.join("seed_3_success.csv")).unwrap();
    assert_eq!(success.lines().count(), 3);
}
