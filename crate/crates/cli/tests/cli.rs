use std::path::Path;
use std::process::{Command, Output};

fn splatmae(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatmae"))
        .env("SPLATMAE_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--splats", "128", "--num-groups", "8", "--group-size", "8", "--pool-size", "12",
    "--hidden-dim", "16", "--slots", "4", "--token-dim", "16", "--encoder-depth", "2",
    "--heads", "2", "--batch-size", "4", "--warmup-epochs", "1", "--checkpoint-every", "2",
];

fn synth(root: &Path) {
    ok(&splatmae(root, &["synth", "--out", "data", "--per-class", "5", "--splats", "160"]));
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    let data = root.join("data");
    let data = data.to_str().unwrap();
    let mut args = vec!["pretrain", "--data", data, "--out", "run", "--epochs", "5"];
    args.extend_from_slice(TINY);
    ok(&splatmae(root, &args));
    let run = root.join("run");
    for f in ["config.toml", "pretrain_log.csv", "last.ckpt", "epoch_0004.ckpt", "epoch_0005.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let ckpt = run.join("last.ckpt");
    ok(&splatmae(
        root,
        &[
            "finetune", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--out", "probe",
            "--task", "cls", "--protocol", "linear", "--epochs", "3", "--batch-size", "4",
        ],
    ));
    let report = std::fs::read_to_string(root.join("probe/cls_report.csv")).unwrap();
    assert!(report.starts_with("class,test_accuracy\n"));
    let overall = report.lines().find(|l| l.starts_with("overall,")).unwrap();
    let acc: f64 = overall.split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(root.join("probe/config.toml").exists());

    // Run directories select among their last numbered checkpoints.
    ok(&splatmae(
        root,
        &[
            "finetune", "--data", data, "--checkpoint", run.to_str().unwrap(), "--out", "seg",
            "--task", "seg", "--classes", "cylinder", "--epochs", "1",
        ],
    ));
    let seg = std::fs::read_to_string(root.join("seg/seg_report.csv")).unwrap();
    assert!(seg.contains("class_miou,"));
}

#[test]
fn zero_epochs_writes_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    let data = root.join("data");
    let mut args = vec!["pretrain", "--data", data.to_str().unwrap(), "--out", "run", "--epochs", "0"];
    args.extend_from_slice(TINY);
    ok(&splatmae(root, &args));
    assert!(root.join("run/last.ckpt").exists());
    let log = std::fs::read_to_string(root.join("run/pretrain_log.csv")).unwrap();
    assert_eq!(log, "epoch,step,total,C,lr\n");
}

#[test]
fn resolved_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    let data = root.join("data");
    let data = data.to_str().unwrap();
    let mut args = vec!["pretrain", "--data", data, "--out", "a", "--epochs", "2"];
    args.extend_from_slice(TINY);
    ok(&splatmae(root, &args));
    let sidecar = root.join("a/config.toml");
    ok(&splatmae(
        root,
        &["pretrain", "--data", data, "--out", "b", "--config", sidecar.to_str().unwrap()],
    ));
    let a = std::fs::read(root.join("a/pretrain_log.csv")).unwrap();
    let b = std::fs::read(root.join("b/pretrain_log.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn metrics_of_identical_files_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    let file = root.join("data/objects/sphere_000.ply");
    let f = file.to_str().unwrap();
    for metric in ["jsd", "chamfer", "mmd"] {
        let out = splatmae(root, &["metrics", "--metric", metric, "--a", f, "--b", f]);
        ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("metric,a,b,value"));
        let row = lines.next().unwrap();
        assert!(row.starts_with(metric));
        assert!(row.ends_with(",0.0"), "{row}");
    }
}

#[test]
fn inspect_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    let out = splatmae(root, &["inspect", root.join("data/objects/box_001.ply").to_str().unwrap()]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("splats 160"));
    assert!(text.contains("violations 0"));
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = splatmae(root, &["pretrain", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.starts_with("{\"error\":\"usage\""), "{err}");

    let missing = root.join("nope.ply");
    let out = splatmae(root, &["inspect", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("\"error\":\"io\""), "{err}");
}
