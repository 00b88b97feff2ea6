use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pidssl::cli::{run, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK};
use pidssl::protocol::{load_config, Manifest, RunStatus, CONFIG_FILE, PHASE2_FILE, REPORTS_FILE};

const TINY: &str = r#"
seed = 3

[dataset]
per_class = 16
height = 8
width = 8

[model]
layer_widths = [64, 16, 64, 8]
encoder_cut = 1

[phase1]
epochs = 2
batch_size = 16
lr_schedule = [[0, 0.003]]

[phase2]
epochs = 2
batch_size = 16

[probe]
epochs = 5

[diagnostic]
every = 1
"#;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("pidssl").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn pretrain(config: &Path, out: &Path, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec!["pretrain", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    call(&args)
}

#[test]
fn pid_prints_xor_and_copy() {
    let (code, out, _) = call(&["pid", "--inline", "T S1 S2 p; 0 0 0 0.25; 1 0 1 0.25; 1 1 0 0.25; 0 1 1 0.25"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("synergy    1.000000"), "{out}");
    for name in ["redundancy 0.000000", "unique_s1  0.000000", "unique_s2  0.000000"] {
        assert!(out.contains(name), "{out}");
    }

    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("copy.txt");
    fs::write(&table, "T S1 S2 p\n0 0 0 0.25\n1 0 1 0.25\n2 1 0 0.25\n3 1 1 0.25\n").unwrap();
    let (code, out, _) = call(&["pid", "--table", table.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("redundancy 1.000000"), "{out}");
}

#[test]
fn pid_rejects_bad_tables() {
    let (code, _, err) = call(&["pid", "--inline", "T S1 S2 p; 0 0 0 0.5; 1 1 x 0.5"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("line 3"), "{err}");
    let (code, _, _) = call(&["pid", "--inline", "T S1 S2 p; 0 0 0 0.5; 1 1 1 0.4"]);
    assert_eq!(code, EXIT_CONFIG, "unnormalized table");
    let (code, _, err) = call(&["pid", "--inline", "0 0 0 1"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("line 1") && err.contains("header"), "{err}");
    assert_eq!(call(&["pid", "--inline", "T S1 S2 p"]).0, EXIT_CONFIG, "no rows");
}

#[test]
fn usage_and_missing_files_are_config_errors() {
    assert_eq!(call(&[]).0, EXIT_CONFIG);
    assert_eq!(call(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(call(&["--help"]).0, EXIT_OK);
    let (code, _, err) = call(&["pretrain", "--config", "/nonexistent/run.toml", "--out", "/tmp/x"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.starts_with("pidssl:"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let missing = tmp.path().join("none.ckpt");
    let (code, _, _) = call(&["probe", "--config", cfg.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    let (code, _, _) = call(&["report", "--run", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    // Pretrain needs somewhere to write.
    assert_eq!(call(&["pretrain", "--config", cfg.to_str().unwrap()]).0, EXIT_CONFIG);
}

#[test]
fn pretrain_probe_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("run");
    let (code, out, err) = pretrain(&cfg, &dir, &["--override", "phase2.variant=gaussian"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("phase2.ckpt: 2 epochs"), "{out}");

    let manifest = Manifest::load(&dir).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    let echoed = load_config(dir.join(CONFIG_FILE), &[]).unwrap();
    assert_eq!(echoed.phase2.variant, pidssl::protocol::Variant::Gaussian);
    assert_eq!(echoed.phase2.epochs, 2);

    // The echoed config differs from the command line without the override.
    let (code, _, err) = pretrain(&cfg, &dir, &[]);
    assert_eq!(code, EXIT_CONFIG, "{err}");

    let ckpt = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let probe = |name: &str, extra: &[&str]| {
        let mut args = vec!["probe".to_string(), "--config".into(), cfg.to_str().unwrap().into(), "--checkpoint".into(), ckpt(name)];
        args.extend(extra.iter().map(|s| s.to_string()));
        let (code, out, err) = call(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code, EXIT_OK, "{err}");
        out
    };
    let p1 = probe("phase1.ckpt", &[]);
    let p2 = probe(PHASE2_FILE, &[]);
    assert!(p1.starts_with("top1 ") && p2.starts_with("top1 "), "{p1} {p2}");
    assert_eq!(probe("phase1.ckpt", &[]), p1, "probe is deterministic");
    let heavy = probe(PHASE2_FILE, &["--policy", "heavy"]);
    assert!(heavy.contains("synergy"), "policy also runs the diagnostic: {heavy}");
    assert!(dir.join("probe-config.toml").is_file());

    let (code, diag, err) = call(&["diagnose", "--config", cfg.to_str().unwrap(), "--checkpoint", &ckpt(PHASE2_FILE)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(diag.contains("redundancy") && diag.contains("control"), "{diag}");
    assert!(fs::read_to_string(dir.join(REPORTS_FILE)).unwrap().lines().count() >= 5);

    let (code, table, _) = call(&["report", "--run", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(table.contains("final_loss") && table.contains("probe") && table.contains("diagnostic"), "{table}");
    assert!(!table.contains("warning"), "{table}");

    let (code, lines, _) = call(&["report", "--run", dir.to_str().unwrap(), "--machine"]);
    assert_eq!(code, EXIT_OK);
    let records: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["kind"] == "phase" && r["phase"] == 2), "{lines}");
    assert!(records.iter().any(|r| r["kind"] == "probe"), "{lines}");

    // Losing phase 2 turns the report into a partial table with a warning.
    fs::remove_file(dir.join(PHASE2_FILE)).unwrap();
    let metrics = dir.join("metrics.jsonl");
    let kept: Vec<String> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"] == 1)
        .map(String::from)
        .collect();
    fs::write(&metrics, kept.join("\n") + "\n").unwrap();
    let (code, table, _) = call(&["report", "--run", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(table.contains("warning"), "{table}");
    let (_, lines, _) = call(&["report", "--run", dir.to_str().unwrap(), "--machine"]);
    assert!(lines.contains("\"warning\""), "{lines}");
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("run");
    let (code, _, err) = pretrain(&cfg, &dir, &["--override", "phase1.lr_schedule=[[0, 1e300]]"]);
    assert_eq!(code, EXIT_DIVERGED, "{err}");
    assert_eq!(Manifest::load(&dir).unwrap().status, RunStatus::Diverged);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pidssl");
    let status = Command::new(bin).args(["pid", "--inline", "T S1 S2 p; 0 0 0 1"]).output().unwrap();
    assert!(status.status.success());
    let status = Command::new(bin).args(["pretrain", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
}
