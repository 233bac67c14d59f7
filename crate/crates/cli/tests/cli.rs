use std::process::Command;
use std::time::{Duration, Instant};

fn idas() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idas"))
}

#[test]
fn selftest_passes_quickly() {
    let start = Instant::now();
    let out = idas().arg("selftest").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn restore_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = idas()
        .args(["restore", "--input", "x.png", "--output"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--checkpoint") && stderr.contains("Usage"), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = idas()
        .args(["synth-data", "--count", "2", "--set", "no_such_key=1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_data_writes_pairs_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = idas()
        .args(["synth-data", "--count", "3", "--set", "seed=7", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("synth-data.run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 7);
    assert_eq!(record["config_fingerprint"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("data").is_dir());
}

#[test]
fn out_dir_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = idas().args(["synth-data", "--count", "1"]).env("IDAS_OUT_DIR", dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synth-data.run.json").exists());
}

/// Tiny end-to-end chain: a few pretraining and distillation steps, then
/// checkpoint reuse, fingerprint checks, restoration and reports.
#[test]
fn train_restore_and_sweep_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let small = ["--set", "pretrain_iters=2", "--set", "distill_iters=2", "--set", "batch_size=2", "--set", "checkpoint_every=1"];
    let run = |args: &[&str]| {
        let o = idas().args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let out_s = out.to_str().unwrap();
    let mut pre = vec!["pretrain", "--out", out_s];
    pre.extend(small);
    run(&pre);
    let prior = out.join("prior.safetensors");
    assert!(prior.exists() && out.join("pretrain_loss.csv").exists());

    let prior_s = prior.to_str().unwrap();
    let mut dis = vec!["distill", "--out", out_s, "--prior", prior_s];
    dis.extend(small);
    run(&dis);
    let model = out.join("model.safetensors");
    let log = std::fs::read_to_string(out.join("distill_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    // A different config must not silently reuse the checkpoint.
    let model_s = model.to_str().unwrap();
    let mismatch = idas()
        .args(["analyze-timesteps", "--out", out_s, "--checkpoint", model_s, "--count", "4", "--set", "lambda_adv=0.5"])
        .output()
        .unwrap();
    assert_eq!(mismatch.status.code(), Some(3));
    run(&["analyze-timesteps", "--out", out_s, "--checkpoint", model_s, "--count", "4", "--set", "lambda_adv=0.5", "--force"]);
    assert!(out.join("timesteps.csv").exists());

    // The prior is not a restorer.
    let wrong = idas().args(["sweep-s", "--out", out_s, "--checkpoint", prior_s, "--count", "2"]).output().unwrap();
    assert_eq!(wrong.status.code(), Some(4));

    run(&["sweep-s", "--out", out_s, "--checkpoint", model_s, "--count", "2", "--s-list", "0,1"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sweep_s.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["seed"], 0);
    assert!(out.join("baseline_bicubic.csv").exists());
    run(&["sweep-t", "--out", out_s, "--checkpoint", model_s, "--count", "2", "--t-list", "50,450"]);
    assert!(out.join("sweep_t.csv").exists());

    run(&["synth-data", "--out", out_s, "--count", "2"]);
    let restored = out.join("restored");
    let input = out.join("data");
    run(&[
        "restore",
        "--out",
        out_s,
        "--checkpoint",
        model_s,
        "--input",
        input.join("lq").to_str().unwrap(),
        "--output",
        restored.to_str().unwrap(),
        "--steer",
        "0.3",
    ]);
    let pngs = std::fs::read_dir(&restored).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 2);
}
