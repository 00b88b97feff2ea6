//! The `pidssl` command line.
//!
//! ```text
//! pidssl pretrain --config run.toml [--override k=v ...] [--out DIR]
//! pidssl pid      --table dist.txt | --inline "T S1 S2 p; 0 0 0 0.5; 1 1 1 0.5"
//! pidssl probe    --config run.toml --checkpoint DIR/phase1.ckpt [--policy heavy]
//! pidssl diagnose --config run.toml --checkpoint DIR/phase2.ckpt [--policy heavy]
//! pidssl report   --run DIR [--machine]
//! ```
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or config error,
//! 3 numerical abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::augment::{AugmentPolicy, PolicyKind};
use crate::eval::{linear_probe, pid_diagnostic, PidDiagnosticReport};
use crate::pid::{decompose, JointDistribution};
use crate::protocol::{
    self, append_report, diagnostic_spec, load_config, read_metrics, Checkpoint, Manifest, MetricsRecord, RunStatus,
    TrainRun, PHASE1_FILE, PHASE2_FILE, REPORTS_FILE,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pidssl", version, about = "Redundancy-reduction SSL with PID diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run two-phase pre-training into a run directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dotted `key=value` override, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose a distribution table `t s1 s2 p`.
    Pid {
        #[arg(long, conflicts_with = "inline", required_unless_present = "inline")]
        table: Option<PathBuf>,
        /// The table with rows separated by `;`, header included.
        #[arg(long)]
        inline: Option<String>,
    },
    /// Linear-probe a checkpoint's encoder.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also run the PID diagnostic with views drawn from this policy.
        #[arg(long)]
        policy: Option<PolicyKind>,
    },
    /// PID diagnostic of a checkpoint's encoder with a shuffled-label control.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// View policy; defaults to the config's.
        #[arg(long)]
        policy: Option<PolicyKind>,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Emit line-delimited JSON instead of a table.
        #[arg(long)]
        machine: bool,
    },
}

impl clap::ValueEnum for PolicyKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[PolicyKind::Standard, PolicyKind::Heavy, PolicyKind::Identity]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            PolicyKind::Standard => "standard",
            PolicyKind::Heavy => "heavy",
            PolicyKind::Identity => "identity",
        }))
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::InvalidDistribution(_)
        | Error::InvalidArgument(_)
        | Error::Checkpoint(_)
        | Error::MissingClass(_)
        | Error::TargetMismatch { .. }
        | Error::AlphabetTooLarge(_)
        | Error::EmptyInput => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "pidssl: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Pretrain { config, overrides, out: dir } => cmd_pretrain(&config, &overrides, dir, out),
        Command::Pid { table, inline } => cmd_pid(table.as_deref(), inline.as_deref(), out),
        Command::Probe { config, checkpoint, overrides, policy } => {
            cmd_probe(&config, &checkpoint, &overrides, policy, out)
        }
        Command::Diagnose { config, checkpoint, overrides, policy } => {
            cmd_diagnose(&config, &checkpoint, &overrides, policy, out)
        }
        Command::Report { run, machine } => cmd_report(&run, machine, out),
    }
}

fn load_run(config: &Path, overrides: &[String]) -> Result<TrainRun> {
    if !config.is_file() {
        return Err(Error::Config(format!("config file {} not found", config.display())));
    }
    load_config(config, overrides)
}

pub fn cmd_pretrain(config: &Path, overrides: &[String], dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let run = load_run(config, overrides)?;
    let dir = dir
        .or_else(|| run.output_dir.clone())
        .ok_or_else(|| Error::Config("no run directory: pass --out or set output_dir".into()))?;
    let outcome = protocol::run_protocol(&run, &dir)?;
    for (name, ckpt) in [(PHASE1_FILE, &outcome.phase1), (PHASE2_FILE, &outcome.phase2)] {
        let last = outcome.metrics.iter().rev().find(|m| m.phase == ckpt.phase);
        writeln!(
            out,
            "{name}: {} epochs, final loss {}",
            ckpt.epochs_completed,
            last.map_or("-".into(), |m| format!("{:.6}", m.loss))
        )?;
    }
    writeln!(out, "run directory {}", dir.display())?;
    Ok(())
}

pub fn cmd_pid(table: Option<&Path>, inline: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let text = match (table, inline) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some(s)) => s.replace(';', "\n"),
        (None, None) => return Err(Error::Config("pass --table or --inline".into())),
    };
    let joint = JointDistribution::from_table(&text)?;
    writeln!(out, "{}", decompose(&joint))?;
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| ".".into())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Echo the config an evaluation command resolved, next to the checkpoint.
fn echo_eval_config(run: &TrainRun, dir: &Path, command: &str) -> Result<()> {
    fs::write(dir.join(format!("{command}-config.toml")), run.to_toml())?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn diagnose(run: &TrainRun, ckpt: &Checkpoint, policy: &AugmentPolicy) -> Result<PidDiagnosticReport> {
    let data = run.train_data()?;
    let spec = diagnostic_spec(&run.diagnostic, ckpt.params.spec.encoder_dim());
    pid_diagnostic(&ckpt.params, &data, policy, &spec, run.seed)
}

fn write_diagnostic(out: &mut dyn Write, r: &PidDiagnosticReport, policy: &str) -> Result<()> {
    writeln!(out, "diagnostic policy {policy}, {} samples, dims {:?}, {} bins", r.samples, r.dims, r.bins)?;
    writeln!(out, "{:<12}{:>12}{:>12}", "component", "value", "control")?;
    let rows = [
        ("redundancy", r.decomposition.redundancy, r.control.floor.redundancy),
        ("unique_s1", r.decomposition.unique_s1, r.control.floor.unique_s1),
        ("unique_s2", r.decomposition.unique_s2, r.control.floor.unique_s2),
        ("synergy", r.decomposition.synergy, r.control.floor.synergy),
        ("joint_mi", r.decomposition.joint_mi, r.control.floor.joint_mi),
    ];
    for (name, v, f) in rows {
        writeln!(out, "{name:<12}{v:>12.6}{f:>12.6}")?;
    }
    Ok(())
}

pub fn cmd_probe(
    config: &Path,
    checkpoint: &Path,
    overrides: &[String],
    policy: Option<PolicyKind>,
    out: &mut dyn Write,
) -> Result<()> {
    let run = load_run(config, overrides)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dir = checkpoint_dir(checkpoint);
    echo_eval_config(&run, &dir, "probe")?;
    let train = run.train_data()?;
    let test = run.test_data()?;
    let result = linear_probe(&ckpt.params, &train, &test, &run.probe, run.probe_seed())?;
    writeln!(out, "top1 {:.4}", result.test_top1)?;
    append_report(
        &dir,
        &json!({
            "kind": "probe",
            "checkpoint": file_name(checkpoint),
            "phase": ckpt.phase,
            "policy": run.policy().name,
            "train_top1": result.train_top1,
            "test_top1": result.test_top1,
        }),
    )?;
    if let Some(kind) = policy {
        let p = AugmentPolicy::from_kind(kind);
        let report = diagnose(&run, &ckpt, &p)?;
        write_diagnostic(out, &report, &p.name)?;
        append_report(&dir, &diagnostic_record(checkpoint, ckpt.phase, &p.name, &report))?;
    }
    Ok(())
}

fn diagnostic_record(checkpoint: &Path, phase: u8, policy: &str, r: &PidDiagnosticReport) -> serde_json::Value {
    json!({
        "kind": "diagnostic",
        "checkpoint": file_name(checkpoint),
        "phase": phase,
        "policy": policy,
        "report": r,
    })
}

pub fn cmd_diagnose(
    config: &Path,
    checkpoint: &Path,
    overrides: &[String],
    policy: Option<PolicyKind>,
    out: &mut dyn Write,
) -> Result<()> {
    let run = load_run(config, overrides)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dir = checkpoint_dir(checkpoint);
    echo_eval_config(&run, &dir, "diagnose")?;
    let p = policy.map_or_else(|| run.policy(), AugmentPolicy::from_kind);
    let report = diagnose(&run, &ckpt, &p)?;
    write_diagnostic(out, &report, &p.name)?;
    append_report(&dir, &diagnostic_record(checkpoint, ckpt.phase, &p.name, &report))?;
    Ok(())
}

fn read_reports(dir: &Path) -> Result<Vec<serde_json::Value>> {
    match fs::read_to_string(dir.join(REPORTS_FILE)) {
        Ok(t) => t
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_report(dir: &Path, machine: bool, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let metrics = read_metrics(&dir.join(protocol::METRICS_FILE))?;
    let reports = read_reports(dir)?;
    let mut warnings = Vec::new();
    if manifest.status != RunStatus::Complete {
        warnings.push(format!(
            "run status {}{}",
            serde_json::to_value(manifest.status).unwrap().as_str().unwrap(),
            manifest.detail.as_ref().map_or(String::new(), |d| format!(": {d}"))
        ));
    }
    for m in &manifest.missing {
        warnings.push(format!("{m} missing"));
    }

    let phase_rows: Vec<(u8, Option<&MetricsRecord>, usize)> = [1u8, 2]
        .into_iter()
        .map(|p| {
            let recs: Vec<&MetricsRecord> = metrics.iter().filter(|m| m.phase == p).collect();
            (p, recs.last().copied(), recs.len())
        })
        .collect();
    let last_pid = |p: u8| metrics.iter().rev().find(|m| m.phase == p && m.joint_mi.is_some());
    let probes: Vec<&serde_json::Value> = reports.iter().filter(|r| r["kind"] == "probe").collect();
    let diags: Vec<&serde_json::Value> = reports.iter().filter(|r| r["kind"] == "diagnostic").collect();

    if machine {
        let mut emit = |v: serde_json::Value| writeln!(out, "{v}");
        emit(json!({"kind": "run", "status": manifest.status, "seed": manifest.seed}))?;
        for (p, last, epochs) in &phase_rows {
            match last {
                Some(m) => emit(json!({"kind": "phase", "phase": p, "epochs": epochs, "final": m, "pid": last_pid(*p)}))?,
                None => emit(json!({"kind": "warning", "message": format!("phase {p} has no metrics")}))?,
            }
        }
        for r in probes.iter().chain(&diags) {
            emit((*r).clone())?;
        }
        for w in &warnings {
            emit(json!({"kind": "warning", "message": w}))?;
        }
        return Ok(());
    }

    writeln!(out, "run {}  seed {}", dir.display(), manifest.seed)?;
    writeln!(
        out,
        "{:<6}{:>7}{:>12}{:>12}{:>12}{:>12}{:>12}",
        "phase", "epochs", "final_loss", "||C-I||", "redundancy", "synergy", "mi_control"
    )?;
    for (p, last, epochs) in &phase_rows {
        match last {
            Some(m) => {
                let pid = last_pid(*p);
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                writeln!(
                    out,
                    "{p:<6}{epochs:>7}{:>12.6}{:>12.4}{:>12}{:>12}{:>12}",
                    m.loss,
                    m.identity_gap,
                    f(pid.and_then(|r| r.redundancy)),
                    f(pid.and_then(|r| r.synergy)),
                    f(pid.and_then(|r| r.control_joint_mi)),
                )?;
            }
            None => {
                writeln!(out, "{p:<6}{:>7}  warning: no metrics for this phase", "-")?;
                warnings.push(format!("phase {p} incomplete"));
            }
        }
    }
    if !probes.is_empty() {
        writeln!(out, "\n{:<14}{:>6}{:>10}{:>10}", "probe", "phase", "policy", "top1")?;
        for r in &probes {
            writeln!(
                out,
                "{:<14}{:>6}{:>10}{:>10.4}",
                r["checkpoint"].as_str().unwrap_or("?"),
                r["phase"].to_string(),
                r["policy"].as_str().unwrap_or("?"),
                r["test_top1"].as_f64().unwrap_or(f64::NAN)
            )?;
        }
    }
    if !diags.is_empty() {
        writeln!(out, "\n{:<14}{:>6}{:>10}{:>12}{:>12}{:>12}{:>12}", "diagnostic", "phase", "policy", "redundancy", "synergy", "joint_mi", "mi_control")?;
        for r in &diags {
            let d = &r["report"]["decomposition"];
            writeln!(
                out,
                "{:<14}{:>6}{:>10}{:>12.4}{:>12.4}{:>12.4}{:>12.4}",
                r["checkpoint"].as_str().unwrap_or("?"),
                r["phase"].to_string(),
                r["policy"].as_str().unwrap_or("?"),
                d["redundancy"].as_f64().unwrap_or(f64::NAN),
                d["synergy"].as_f64().unwrap_or(f64::NAN),
                d["joint_mi"].as_f64().unwrap_or(f64::NAN),
                r["report"]["control"]["floor"]["joint_mi"].as_f64().unwrap_or(f64::NAN),
            )?;
        }
    }
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(())
}
