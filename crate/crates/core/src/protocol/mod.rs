//! Two-phase pre-training.
//!
//! Phase 1 trains with the plain objective (Barlow Twins with a zero
//! off-diagonal target, or plain W-MSE). Phase 2 resumes from the phase-1
//! weights and optimizer moments with an off-diagonal target: a frozen
//! Gaussian matrix, or the average correlation of the frozen phase-1 network
//! measured in one deterministic pass over the data.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml     fully resolved config, written before anything else
//! phase1.ckpt     PIDSSL01 checkpoints
//! phase2.ckpt
//! metrics.jsonl   one MetricsRecord per epoch
//! manifest.json   artifact list with sha256 hashes and run status
//! reports.jsonl   appended by evaluation commands
//! ```
//!
//! Re-running on an existing directory with the same config reuses finished
//! phase checkpoints, so an interrupted run resumes at the next phase.

pub mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{params_hash, sha256_hex, Checkpoint};
pub use config::{
    apply_override, load_config, parse_config, AugmentConfig, DiagnosticConfig, PhaseConfig, ProbeConfig, TrainRun,
    TrainScope, Variant,
};

use crate::augment::{make_views, to_matrix, view_stream, AugmentPolicy, DatasetSpec, ImageSample};
use crate::eval::{pid_diagnostic, DiagnosticSpec, DimSelect};
use crate::linalg::{EmbeddingBatch, Jitter};
use crate::losses::{
    sample_gaussian_target, AverageAccumulator, BtLossConfig, Objective, OffDiagonalTarget, TargetKind, DEFAULT_EPS,
};
use crate::network::{add_grads, adam_step_from, init_params, AdamState, ModelParams};
use crate::{rng, Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const PHASE1_FILE: &str = "phase1.ckpt";
pub const PHASE2_FILE: &str = "phase2.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.jsonl";

/// One epoch of training. Loss fields are means over the epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub diagonal: f64,
    pub off_diagonal: f64,
    /// Mean `||C - I||_F` of the penalized correlation matrix.
    pub identity_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synergy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_mi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_joint_mi: Option<f64>,
    /// Set on the last record of an aborted phase; the loss fields then cover
    /// only the batches before the failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Receives each record as soon as its epoch finishes.
pub type MetricsSink<'a> = &'a mut dyn FnMut(&MetricsRecord) -> Result<()>;

fn objective(run: &TrainRun, cfg: &PhaseConfig, target: Option<OffDiagonalTarget>) -> Objective {
    Objective {
        family: cfg.loss,
        cfg: BtLossConfig { lambda: cfg.lambda, eps: DEFAULT_EPS },
        target,
        jitter: Jitter::Relative(run.jitter),
    }
}

/// Batch composition: full batches only, unless the data is smaller than one
/// batch, in which case everything forms a single batch.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    if order.len() < batch_size {
        return if order.len() >= 2 { vec![order] } else { Vec::new() };
    }
    order.chunks_exact(batch_size).collect()
}

/// Both views of every sample in `idx`, as `|idx| x pixels` matrices. Each
/// sample has its own stream, so this is independent of thread scheduling.
fn view_matrices(
    data: &[ImageSample],
    idx: &[usize],
    policy: &AugmentPolicy,
    stream: impl Fn(usize) -> rand_chacha::ChaCha8Rng + Sync,
) -> (Array2<f64>, Array2<f64>) {
    let (a, b): (Vec<ImageSample>, Vec<ImageSample>) =
        idx.par_iter().map(|&i| make_views(&data[i], policy, &mut stream(i))).unzip();
    (to_matrix(&a), to_matrix(&b))
}

fn check_data(run: &TrainRun, data: &[ImageSample]) -> Result<()> {
    let d = data.first().ok_or(Error::EmptyInput)?.dim();
    if d != run.model.input_dim() {
        return Err(Error::Config(format!(
            "model input width {} does not match {d} pixels per sample",
            run.model.input_dim()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct EpochStats {
    batches: usize,
    loss: f64,
    diagonal: f64,
    off_diagonal: f64,
    identity_gap: f64,
}

impl EpochStats {
    fn record(&self, phase: u8, epoch: usize, lr: f64) -> MetricsRecord {
        let k = self.batches.max(1) as f64;
        MetricsRecord {
            phase,
            epoch,
            lr,
            loss: self.loss / k,
            diagonal: self.diagonal / k,
            off_diagonal: self.off_diagonal / k,
            identity_gap: self.identity_gap / k,
            redundancy: None,
            synergy: None,
            joint_mi: None,
            control_joint_mi: None,
            aborted: None,
        }
    }
}

struct PhaseInputs<'a> {
    run: &'a TrainRun,
    data: &'a [ImageSample],
    phase: u8,
    cfg: &'a PhaseConfig,
    objective: Objective,
    first_trainable: usize,
}

fn train_phase(
    inp: PhaseInputs<'_>,
    params: &mut ModelParams,
    adam: &mut AdamState,
    sink: MetricsSink<'_>,
) -> Result<Vec<MetricsRecord>> {
    let PhaseInputs { run, data, phase, cfg, objective, first_trainable } = inp;
    let policy = run.policy();
    adam.weight_decay = cfg.weight_decay;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(&[run.seed, rng::tag::SHUFFLE, phase as u64, epoch as u64]));
        let mut stats = EpochStats::default();
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let step = (|| -> Result<std::result::Result<(), String>> {
                let (xa, xb) = view_matrices(data, idx, &policy, |i| {
                    view_stream(run.seed, phase as u64, epoch as u64, i as u64)
                });
                let fa = params.forward(xa.view())?;
                let fb = params.forward(xb.view())?;
                let za = EmbeddingBatch::new(fa.embeddings.clone());
                let zb = EmbeddingBatch::new(fb.embeddings.clone());
                let (za, zb) = match (za, zb) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => return Ok(Err("non-finite embeddings".into())),
                };
                let g = match objective.gradient(&za, &zb) {
                    Ok(g) => g,
                    Err(e @ (Error::NotPositiveDefinite { .. } | Error::NonFinite)) => return Ok(Err(e.to_string())),
                    Err(e) => return Err(e),
                };
                if !g.terms.total.is_finite() {
                    return Ok(Err(format!("non-finite loss {}", g.terms.total)));
                }
                let mut grads = params.backward(&fa.cache, g.grad_a.view())?;
                add_grads(&mut grads, &params.backward(&fb.cache, g.grad_b.view())?);
                adam_step_from(params, &grads, adam, first_trainable)?;
                if !params.is_finite() {
                    return Ok(Err("non-finite parameters after update".into()));
                }
                stats.batches += 1;
                stats.loss += g.terms.total;
                stats.diagonal += g.terms.diagonal;
                stats.off_diagonal += g.terms.off_diagonal;
                stats.identity_gap += g.terms.c.identity_gap();
                Ok(Ok(()))
            })()?;
            if let Err(detail) = step {
                let detail = format!("{detail} at batch {b}");
                let mut rec = stats.record(phase, epoch, adam.lr);
                rec.aborted = Some(detail.clone());
                sink(&rec)?;
                return Err(Error::Diverged { phase, epoch, detail });
            }
        }
        let mut rec = stats.record(phase, epoch, adam.lr);
        let d = &run.diagnostic;
        if d.every > 0 && (epoch + 1) % d.every == 0 {
            let report = pid_diagnostic(
                &*params,
                data,
                &policy,
                &diagnostic_spec(d, params.spec.encoder_dim()),
                rng::derive_seed(&[run.seed, rng::tag::DIAGNOSTIC, phase as u64, epoch as u64]),
            )?;
            rec.redundancy = Some(report.decomposition.redundancy);
            rec.synergy = Some(report.decomposition.synergy);
            rec.joint_mi = Some(report.decomposition.joint_mi);
            rec.control_joint_mi = Some(report.control.floor.joint_mi);
        }
        sink(&rec)?;
        metrics.push(rec);
    }
    Ok(metrics)
}

pub fn diagnostic_spec(cfg: &DiagnosticConfig, encoder_dim: usize) -> DiagnosticSpec {
    DiagnosticSpec {
        bins: cfg.bins,
        dims: DimSelect::TopVariance(cfg.dims.min(encoder_dim)),
        samples: cfg.samples,
        shuffles: cfg.shuffles,
    }
}

/// Phase 1: fresh parameters, plain objective.
pub fn pretrain_phase1(run: &TrainRun, data: &[ImageSample], sink: MetricsSink<'_>) -> Result<Checkpoint> {
    run.validate()?;
    check_data(run, data)?;
    if run.phase1.variant != Variant::None {
        return Err(Error::Config("phase1.variant must be none".into()));
    }
    let mut params = init_params(&run.model, run.seed)?;
    let mut adam = AdamState::new(&params, run.phase1.lr_at(0), run.phase1.weight_decay);
    let inp = PhaseInputs {
        run,
        data,
        phase: 1,
        cfg: &run.phase1,
        objective: objective(run, &run.phase1, None),
        first_trainable: 0,
    };
    train_phase(inp, &mut params, &mut adam, sink)?;
    Ok(Checkpoint { phase: 1, epochs_completed: run.phase1.epochs, seed: run.seed, params, adam, target: None })
}

/// One deterministic pass of the frozen network over `data` in natural order,
/// averaging the correlation matrix the phase-2 objective penalizes.
pub fn compute_average_c(ckpt: &Checkpoint, run: &TrainRun, data: &[ImageSample], batch_size: usize) -> Result<OffDiagonalTarget> {
    let order: Vec<usize> = (0..data.len()).collect();
    let chunks = batches(&order, batch_size);
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("statistics pass needs at least one batch of 2 samples".into()));
    }
    let policy = run.policy();
    let obj = objective(run, &run.phase2, None);
    let mut acc = AverageAccumulator::new(ckpt.params.spec.output_dim());
    for idx in chunks {
        let (xa, xb) = view_matrices(data, idx, &policy, |i| rng::stream(&[run.seed, rng::tag::STATISTICS, i as u64]));
        let za = EmbeddingBatch::new(ckpt.params.forward(xa.view())?.embeddings)?;
        let zb = EmbeddingBatch::new(ckpt.params.forward(xb.view())?.embeddings)?;
        acc.accumulate(&obj.correlation(&za, &zb)?)?;
    }
    acc.to_target()
}

/// The phase-2 target for `run`: a frozen Gaussian or the average correlation.
pub fn phase2_target(run: &TrainRun, ckpt: &Checkpoint, data: &[ImageSample]) -> Result<OffDiagonalTarget> {
    match run.phase2.variant {
        Variant::Gaussian => {
            let seed = rng::derive_seed(&[run.seed, rng::tag::GAUSSIAN_TARGET]);
            let g = sample_gaussian_target(ckpt.params.spec.output_dim(), run.phase2.sigma, seed)?;
            Ok(if run.phase2.clamp_target { g.clamped() } else { g })
        }
        Variant::Average => compute_average_c(ckpt, run, data, run.phase2.batch_size),
        Variant::None => Err(Error::Config("phase2.variant must be gaussian or average".into())),
    }
}

/// Phase 2: resume from `ckpt` (weights and Adam moments) with `target`.
pub fn pretrain_phase2(
    ckpt: &Checkpoint,
    run: &TrainRun,
    data: &[ImageSample],
    target: OffDiagonalTarget,
    sink: MetricsSink<'_>,
) -> Result<Checkpoint> {
    run.validate()?;
    check_data(run, data)?;
    let expected = match run.phase2.variant {
        Variant::Gaussian => TargetKind::Gaussian,
        Variant::Average => TargetKind::Average,
        Variant::None => return Err(Error::Config("phase2.variant must be gaussian or average".into())),
    };
    if target.kind() != expected {
        return Err(Error::TargetMismatch { expected: expected.to_string(), found: target.kind().to_string() });
    }
    target.check_dim(ckpt.params.spec.output_dim())?;
    let mut params = ckpt.params.clone();
    let mut adam = ckpt.adam.clone();
    let first_trainable = match run.phase2.train_scope {
        TrainScope::Full => 0,
        TrainScope::ProjectorOnly => params.spec.encoder_cut,
    };
    let inp = PhaseInputs {
        run,
        data,
        phase: 2,
        cfg: &run.phase2,
        objective: objective(run, &run.phase2, Some(target.clone())),
        first_trainable,
    };
    train_phase(inp, &mut params, &mut adam, sink)?;
    Ok(Checkpoint {
        phase: 2,
        epochs_completed: run.phase2.epochs,
        seed: run.seed,
        params,
        adam,
        target: Some(target),
    })
}

impl TrainRun {
    pub fn train_data(&self) -> Result<Vec<ImageSample>> {
        self.dataset.load(0)
    }

    /// Held-out data: `test_dataset` if given, otherwise the second split of
    /// a synthetic training set.
    pub fn test_data(&self) -> Result<Vec<ImageSample>> {
        match (&self.test_dataset, &self.dataset) {
            (Some(t), _) => t.load(0),
            (None, DatasetSpec::Synthetic(_)) => self.dataset.load(1),
            (None, _) => Err(Error::Config("test_dataset is required for file-backed datasets".into())),
        }
    }
}

/// What `run_protocol` produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub phase1: Checkpoint,
    pub phase2: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

fn metrics_line(rec: &MetricsRecord) -> String {
    let mut s = serde_json::to_string(rec).expect("metrics serialize");
    s.push('\n');
    s
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    checkpoint::write_atomic(path, records.iter().map(metrics_line).collect::<String>().as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Partial,
    Diverged,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub seed: u64,
    pub artifacts: Vec<ArtifactEntry>,
    /// Expected artifacts that are absent.
    pub missing: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.path == name).map(|a| a.sha256.as_str())
    }
}

fn write_manifest(dir: &Path, seed: u64, status: RunStatus, detail: Option<String>) -> Result<Manifest> {
    let mut artifacts = Vec::new();
    let mut missing = Vec::new();
    for name in [CONFIG_FILE, PHASE1_FILE, PHASE2_FILE, METRICS_FILE] {
        match fs::read(dir.join(name)) {
            Ok(bytes) => artifacts.push(ArtifactEntry { path: name.into(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => missing.push(name.to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    let manifest = Manifest { status, seed, artifacts, missing, detail };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    checkpoint::write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Echo the resolved config into `dir`, refusing to mix configs in one
/// directory.
pub fn echo_config(run: &TrainRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = run.to_toml();
    let path = dir.join(CONFIG_FILE);
    match fs::read_to_string(&path) {
        Ok(existing) if existing == text => Ok(()),
        Ok(_) => Err(Error::Config(format!("{} holds a run with a different config", dir.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => checkpoint::write_atomic(&path, text.as_bytes()),
        Err(e) => Err(e.into()),
    }
}

fn load_phase(path: &Path, phase: u8, run: &TrainRun) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.phase != phase || ckpt.seed != run.seed || ckpt.params.spec != run.model {
        return Err(Error::Checkpoint(format!("{} does not belong to this run", path.display())));
    }
    Ok(Some(ckpt))
}

/// Phase 1, the statistics pass if needed, and phase 2, with all artifacts
/// written to `dir`.
pub fn run_protocol(run: &TrainRun, dir: &Path) -> Result<RunOutcome> {
    run.validate()?;
    echo_config(run, dir)?;
    let data = run.train_data()?;
    check_data(run, &data)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics: Vec<MetricsRecord> = Vec::new();

    let result = (|| -> Result<(Checkpoint, Checkpoint)> {
        let phase1 = match load_phase(&dir.join(PHASE1_FILE), 1, run)? {
            Some(c) => {
                metrics = read_metrics(&metrics_path)?.into_iter().filter(|r| r.phase == 1).collect();
                c
            }
            None => {
                write_metrics(&metrics_path, &[])?;
                let ckpt = train_logged(&metrics_path, &mut metrics, |sink| pretrain_phase1(run, &data, sink))?;
                ckpt.save(dir.join(PHASE1_FILE))?;
                ckpt
            }
        };
        write_manifest(dir, run.seed, RunStatus::Partial, None)?;
        let phase2 = match load_phase(&dir.join(PHASE2_FILE), 2, run)? {
            Some(c) => {
                metrics = read_metrics(&metrics_path)?;
                c
            }
            None => {
                write_metrics(&metrics_path, &metrics)?;
                let target = phase2_target(run, &phase1, &data)?;
                let ckpt =
                    train_logged(&metrics_path, &mut metrics, |sink| pretrain_phase2(&phase1, run, &data, target, sink))?;
                ckpt.save(dir.join(PHASE2_FILE))?;
                ckpt
            }
        };
        Ok((phase1, phase2))
    })();

    match result {
        Ok((phase1, phase2)) => {
            write_manifest(dir, run.seed, RunStatus::Complete, None)?;
            Ok(RunOutcome { dir: dir.to_path_buf(), phase1, phase2, metrics })
        }
        Err(e) => {
            let status = if matches!(e, Error::Diverged { .. }) { RunStatus::Diverged } else { RunStatus::Partial };
            write_manifest(dir, run.seed, status, Some(e.to_string()))?;
            Err(e)
        }
    }
}

/// Run `train` with a sink that appends each record to the metrics file.
fn train_logged(
    path: &Path,
    metrics: &mut Vec<MetricsRecord>,
    train: impl FnOnce(MetricsSink<'_>) -> Result<Checkpoint>,
) -> Result<Checkpoint> {
    let mut file = fs::OpenOptions::new().append(true).open(path)?;
    let mut sink = |rec: &MetricsRecord| -> Result<()> {
        file.write_all(metrics_line(rec).as_bytes())?;
        metrics.push(rec.clone());
        Ok(())
    };
    train(&mut sink)
}

/// Append one JSON record to the run's `reports.jsonl`.
pub fn append_report(dir: &Path, record: &serde_json::Value) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(REPORTS_FILE))?;
    writeln!(f, "{}", serde_json::to_string(record).expect("report serializes"))?;
    Ok(())
}
