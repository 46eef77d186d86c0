//! End-to-end tests of the command-line interface, driving the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deep-jscc"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let body = format!(
        r#"
output_dir = "run-out"
seed = 7

[scheme]
kind = "multi-decoder"

[layers]
bandwidths = [32, 32]

[channel]
kind = "awgn"
train_snr_db = 10.0

[optimizer]
learning_rate = 0.001
batch_size = 16
max_epochs = 2
early_stop_patience = 5

[dataset]
name = "synthetic:32,8,8"
{extra}
"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn dry_run_prints_resolved_config_and_param_count() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "");
    let out = run(&["train", "--config", "exp.toml", "--dry-run"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("parameter_count ="));
    assert!(stdout.contains("multi-decoder"));
    // no compute: the output directory is not created
    assert!(!dir.path().join("run-out").exists());
}

#[test]
fn invalid_learning_rate_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.toml", "").to_str().unwrap();
    let text = std::fs::read_to_string(dir.path().join("bad.toml")).unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        text.replace("learning_rate = 0.001", "learning_rate = -0.5"),
    )
    .unwrap();
    let out = run(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "stderr: {stderr}");
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "odd.toml", "bogus_key = 3\n");
    let out = run(&["train", "--config", "odd.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "stderr: {stderr}");
}

#[test]
fn train_sweep_plot_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "");
    let out = run(&["train", "--config", "exp.toml"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // checkpoint directory with metadata naming the scheme kind
    let ckpt = dir.path().join("run-out/checkpoint");
    let meta = std::fs::read_to_string(ckpt.join("meta.json")).unwrap();
    assert!(meta.contains("multi-decoder"));
    assert!(ckpt.join("params.bin").is_file());
    assert!(ckpt.join("history.jsonl").is_file());
    // the resolved config snapshot sits next to it
    assert!(dir.path().join("run-out/config.resolved.toml").is_file());

    // identical sweeps are byte-identical
    let sweep_args = |out_name: &str| {
        vec![
            "sweep".to_string(),
            "--checkpoint".into(),
            "run-out/checkpoint".into(),
            "--out".into(),
            out_name.to_string(),
            "--snrs".into(),
            "1,10".into(),
            "--realizations".into(),
            "1".into(),
            "--seed".into(),
            "7".into(),
            "--dataset".into(),
            "synthetic:32,8,8".into(),
            "--test-count".into(),
            "4".into(),
        ]
    };
    let args_a: Vec<String> = sweep_args("a.csv");
    let a: Vec<&str> = args_a.iter().map(String::as_str).collect();
    let out = run(&a, dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let args_b: Vec<String> = sweep_args("b.csv");
    let b: Vec<&str> = args_b.iter().map(String::as_str).collect();
    let out = run(&b, dir.path());
    assert!(out.status.success());
    let bytes_a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b, "seeded sweeps must be byte-identical");
    assert!(dir.path().join("a.csv.meta.json").is_file());

    // the --snrs override actually lands in the table
    let table = String::from_utf8(bytes_a).unwrap();
    assert!(table.contains(",1,") && table.contains(",10,"), "table: {table}");
    assert!(!table.contains(",25,"));

    // plots in every mode
    for mode in ["layers", "envelope", "residual-m"] {
        let out = run(
            &["plot", "--out", &format!("fig-{mode}.svg"), "--mode", mode, "a.csv"],
            dir.path(),
        );
        assert!(out.status.success(), "mode {mode}: {}", String::from_utf8_lossy(&out.stderr));
        let svg = std::fs::read_to_string(dir.path().join(format!("fig-{mode}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    let out = run(
        &["plot", "--out", "fig-bars.svg", "--mode", "layer-compare", "--at-snr", "10", "a.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // self-comparison: all deltas zero, exit 0
    let out = run(&["compare", "a.csv", "b.csv"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max |delta| = 0 dB"), "stdout: {stdout}");

    // mismatched grids are a usage error
    let args_c: Vec<String> = sweep_args("c.csv")
        .into_iter()
        .map(|s| if s == "1,10" { "5,15".to_string() } else { s })
        .collect();
    let c: Vec<&str> = args_c.iter().map(String::as_str).collect();
    let out = run(&c, dir.path());
    assert!(out.status.success());
    let out = run(&["compare", "a.csv", "c.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("grid mismatch"), "stderr: {stderr}");
}

#[test]
fn sweep_rejects_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["sweep", "--checkpoint", "nope", "--out", "x.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}
