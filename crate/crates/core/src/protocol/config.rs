//! Run configuration: a TOML file deserialized into [`TrainRun`], with
//! dotted-path `key=value` overrides applied before deserialization.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/bt"
//!
//! [dataset]
//! kind = "synthetic"
//! seed = 0
//! classes = 4
//! per_class = 500
//! height = 16
//! width = 16
//! snr = 4.0
//! max_shift = 3
//!
//! [model]
//! layer_widths = [256, 128, 32, 128, 16]
//! activation = "relu"
//! encoder_cut = 2
//!
//! [augment]
//! policy = "heavy"        # standard | heavy | identity, fields below override
//! noise_std = 0.05
//!
//! [phase1]
//! epochs = 50
//! batch_size = 128
//! lr_schedule = [[0, 0.15], [2, 0.001]]
//! loss = "bt"             # bt | wmse
//! variant = "none"        # none | gaussian | average
//! lambda = 0.005
//!
//! [phase2]
//! variant = "average"
//! lambda = 0.1
//! train_scope = "full"    # full | projector_only
//! ```
//!
//! Every key has a default; an empty file is a valid run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, DatasetSpec, PolicyKind, SynthConfig};
use crate::losses::{LossFamily, PHASE1_LAMBDA, PHASE2_LAMBDA};
use crate::network::{MlpSpec, DEFAULT_WEIGHT_DECAY};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Gaussian,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    Full,
    ProjectorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `(start_epoch, lr)` pairs; the lr of the last entry whose start is
    /// `<= epoch` applies.
    pub lr_schedule: Vec<(usize, f64)>,
    pub loss: LossFamily,
    pub variant: Variant,
    pub lambda: f64,
    /// Standard deviation of the Gaussian target entries.
    pub sigma: f64,
    /// Clamp the Gaussian target into `[-1, 1]`.
    pub clamp_target: bool,
    pub train_scope: TrainScope,
    pub weight_decay: f64,
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr_schedule: vec![(0, 0.15), (2, 0.001)],
            loss: LossFamily::Bt,
            variant: Variant::None,
            lambda: PHASE1_LAMBDA,
            sigma: 1.0,
            clamp_target: false,
            train_scope: TrainScope::Full,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }

    pub fn phase2() -> Self {
        Self {
            lr_schedule: vec![(0, 0.001)],
            variant: Variant::Average,
            lambda: PHASE2_LAMBDA,
            ..Self::phase1()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(0.0, |&(_, lr)| lr)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{name}: {msg}")));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if self.lr_schedule.first().map(|e| e.0) != Some(0) {
            return bad("lr_schedule must start at epoch 0".into());
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr_schedule epochs must increase".into());
        }
        if self.lr_schedule.iter().any(|e| !(e.1 >= 0.0) || !e.1.is_finite()) {
            return bad("learning rates must be finite and >= 0".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0".into());
        }
        if self.variant == Variant::Gaussian && !(self.sigma > 0.0) {
            return bad("sigma must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

/// Augmentation section: a preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub policy: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_scale: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grayscale_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
}

impl AugmentConfig {
    pub fn preset(policy: PolicyKind) -> Self {
        Self {
            policy,
            crop_scale: None,
            aspect_range: None,
            flip_prob: None,
            grayscale_prob: None,
            brightness: None,
            contrast: None,
            saturation: None,
            jitter_prob: None,
            noise_std: None,
        }
    }

    pub fn resolve(&self) -> AugmentPolicy {
        let mut p = AugmentPolicy::from_kind(self.policy);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(crop_scale, aspect_range, flip_prob, grayscale_prob, brightness, contrast, saturation, jitter_prob, noise_std);
        p
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::preset(PolicyKind::Standard)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 256, lr: 0.01, seed: None }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe: epochs, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticConfig {
    /// Run the PID diagnostic every `every` epochs during training; 0 disables.
    pub every: usize,
    pub bins: usize,
    /// Number of highest-variance encoder dimensions to quantize.
    pub dims: usize,
    /// Maximum number of samples used; 0 means all.
    pub samples: usize,
    /// Shuffled-label control draws.
    pub shuffles: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self { every: 10, bins: 4, dims: 2, samples: 0, shuffles: 16 }
    }
}

/// A complete two-phase run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Relative Cholesky jitter for the W-MSE family, times `trace / d`.
    pub jitter: f64,
    pub dataset: DatasetSpec,
    /// Held-out data for probing; defaults to an independent split of a
    /// synthetic training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<DatasetSpec>,
    pub model: MlpSpec,
    pub augment: AugmentConfig,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub probe: ProbeConfig,
    pub diagnostic: DiagnosticConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        let dataset = SynthConfig::new(4, 500, 16, 16, 1, 0).with_snr(4.0).with_shift(3);
        Self {
            seed: 0,
            output_dir: None,
            jitter: 1e-5,
            dataset: DatasetSpec::Synthetic(dataset),
            test_dataset: None,
            model: MlpSpec::with_projector(&[256, 128, 32], 16),
            augment: AugmentConfig::default(),
            phase1: PhaseConfig::phase1(),
            phase2: PhaseConfig::phase2(),
            probe: ProbeConfig::default(),
            diagnostic: DiagnosticConfig::default(),
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        self.phase1.validate("phase1")?;
        self.phase2.validate("phase2")?;
        if self.phase1.variant != Variant::None {
            return Err(Error::Config("phase1.variant must be none".into()));
        }
        if self.phase2.variant == Variant::None {
            return Err(Error::Config("phase2.variant must be gaussian or average".into()));
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.augment.resolve().validate().map_err(|e| Error::Config(format!("augment: {e}")))?;
        self.probe.validate()?;
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::Config("jitter must be >= 0".into()));
        }
        if self.diagnostic.bins < 2 || self.diagnostic.dims < 1 {
            return Err(Error::Config("diagnostic: bins >= 2 and dims >= 1 required".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> AugmentPolicy {
        self.augment.resolve()
    }

    pub fn probe_seed(&self) -> u64 {
        self.probe.seed.unwrap_or(self.seed)
    }

    /// The fully resolved config as TOML, as echoed into run directories.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Parse a config document and apply `key.path=value` overrides.
///
/// The result is layered over the default run, so a partial `[phase2]` table
/// keeps the phase-2 defaults for every key it does not set. A table that
/// names a `kind` (a dataset) replaces the default wholesale instead.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<TrainRun> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut merged = toml::Table::try_from(TrainRun::default()).expect("default run serializes");
    merge_tables(&mut merged, table);
    let run: TrainRun = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    run.validate()?;
    Ok(run)
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<TrainRun> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

/// Set `a.b.c = value` in `table`, creating intermediate tables. The value is
/// parsed as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
