//! Drives the compiled binary through a full offline run.

use std::fs;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-lens"))
}

#[test]
fn cli_runs_the_offline_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("config.json");
    let config = serde_json::json!({
        "dataset": { "kind": "procedural", "count": 32, "side": 16 },
        "variants": ["vae"],
        "training": {
            "vae": {
                "variant": "vae",
                "epochs": 1,
                "batch_size": 16,
                "hidden_sizes": [12],
                "latent_dim": 3
            }
        },
        "explainer": { "backend": "heuristic", "samples_n": 3 },
        "out_dir": out_dir,
        "seed": 3
    });
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    for subcommand in ["train", "traverse", "explain", "report"] {
        let output = binary()
            .arg(subcommand)
            .arg("--config")
            .arg(&config_path)
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "{subcommand} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }

    assert!(out_dir.join("params/vae.params").exists());
    assert!(out_dir.join("sequences.json").exists());
    assert!(out_dir.join("records.jsonl").exists());
    assert!(out_dir.join("report.md").exists());

    // Seed override resamples the same run; the help screen lists every
    // stage.
    let output = binary()
        .arg("explain")
        .arg("--config")
        .arg(&config_path)
        .arg("--seed")
        .arg("4")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("explained 3 sequences"));

    let help = binary().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for stage in ["train", "traverse", "explain", "calibrate", "select", "evaluate", "report"] {
        assert!(text.contains(stage), "help missing {stage}");
    }
}

#[test]
fn cli_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .arg("report")
        .arg("--out")
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "stderr was: {stderr}");
}
