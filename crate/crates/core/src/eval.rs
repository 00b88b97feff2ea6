//! Linear-probe evaluation and the PID diagnostic of trained encoders.
//!
//! The diagnostic treats the two augmented views as sources and the class
//! label as target. Plug-in estimates of mutual information are biased
//! upward at finite sample sizes, so every report carries a shuffled-label
//! control: the same symbols decomposed against randomly permuted labels.
//! Claims about a report should be made relative to `control.floor`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, to_matrix, AugmentPolicy, ImageSample};
use crate::linalg::EmbeddingBatch;
use crate::network::{adam_step, init_params, Activation, AdamState, MlpSpec, ModelParams};
use crate::pid::{decompose, estimate_joint, quantize_embeddings, PidDecomposition};
use crate::protocol::ProbeConfig;
use crate::{rng, Error, Result};

/// Absolute slack added to the control floor so that exact zeros compare as
/// within-floor despite rounding.
const FLOOR_SLACK: f64 = 1e-9;
/// Floor = mean + `FLOOR_SIGMAS` standard deviations of the shuffled draws.
const FLOOR_SIGMAS: f64 = 4.0;

/// Anything that maps a batch of images to one feature row per image.
pub trait Encoder {
    fn encode_samples(&self, samples: &[ImageSample]) -> Result<Array2<f64>>;
}

impl Encoder for ModelParams {
    fn encode_samples(&self, samples: &[ImageSample]) -> Result<Array2<f64>> {
        self.encode(to_matrix(samples).view())
    }
}

/// Raw pixels as features.
pub struct PixelEncoder;

impl Encoder for PixelEncoder {
    fn encode_samples(&self, samples: &[ImageSample]) -> Result<Array2<f64>> {
        Ok(to_matrix(samples))
    }
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// A trained softmax classifier over standardized features.
#[derive(Debug, Clone)]
pub struct SoftmaxProbe {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
    layer: ModelParams,
}

impl SoftmaxProbe {
    fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.inv_std
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape(self.mean.len(), x.ncols()));
        }
        Ok(self.layer.forward(self.standardize(x).view())?.embeddings)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self
            .logits(x)?
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    z
}

/// Train a single affine layer + softmax with cross-entropy and Adam.
pub fn train_probe(x: ArrayView2<'_, f64>, labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<SoftmaxProbe> {
    cfg.validate()?;
    let n = x.nrows();
    if n != labels.len() {
        return Err(Error::shape(n, labels.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass(k));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 0.0);
    let inv_std = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 });
    let spec = MlpSpec { layer_widths: vec![x.ncols(), classes], activation: Activation::Relu, encoder_cut: 1 };
    let mut layer = init_params(&spec, rng::derive_seed(&[seed, rng::tag::PROBE]))?;
    layer.layers[0].weight.fill(0.0);
    let mut probe = SoftmaxProbe { mean, inv_std, layer: layer.clone() };
    let xs = probe.standardize(x);
    let mut adam = AdamState::new(&layer, cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(&[seed, rng::tag::PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xs.select(Axis(0), chunk);
            let out = layer.forward(xb.view())?;
            let mut g = softmax_rows(out.embeddings);
            for (r, &i) in chunk.iter().enumerate() {
                g[[r, labels[i]]] -= 1.0;
            }
            g /= chunk.len() as f64;
            let grads = layer.backward(&out.cache, g.view())?;
            adam_step(&mut layer, &grads, &mut adam)?;
        }
    }
    probe.layer = layer;
    Ok(probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub train_top1: f64,
    pub test_top1: f64,
}

/// Probe precomputed features.
pub fn probe_features(
    train_x: ArrayView2<'_, f64>,
    train_y: &[usize],
    test_x: ArrayView2<'_, f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let probe = train_probe(train_x, train_y, cfg, seed)?;
    let classes = train_y.iter().max().map_or(0, |m| m + 1);
    if let Some(&k) = test_y.iter().find(|&&l| l >= classes) {
        return Err(Error::MissingClass(k));
    }
    Ok(ProbeOutcome {
        train_top1: top1_accuracy(&probe.predict(train_x)?, train_y)?,
        test_top1: top1_accuracy(&probe.predict(test_x)?, test_y)?,
    })
}

/// Freeze `encoder`, fit a softmax probe on its outputs for unaugmented
/// training images, and report top-1 accuracy.
pub fn linear_probe(
    encoder: &impl Encoder,
    train: &[ImageSample],
    test: &[ImageSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let labels = |s: &[ImageSample]| s.iter().map(|x| x.label).collect::<Vec<_>>();
    let ftrain = encoder.encode_samples(train)?;
    let ftest = encoder.encode_samples(test)?;
    probe_features(ftrain.view(), &labels(train), ftest.view(), &labels(test), cfg, seed)
}

/// Which encoder dimensions the diagnostic quantizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSelect {
    /// The `k` dimensions of highest variance over both views.
    TopVariance(usize),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSpec {
    pub bins: usize,
    pub dims: DimSelect,
    /// Maximum number of samples, 0 for all.
    pub samples: usize,
    pub shuffles: usize,
}

impl Default for DiagnosticSpec {
    fn default() -> Self {
        Self { bins: 4, dims: DimSelect::TopVariance(2), samples: 0, shuffles: 16 }
    }
}

/// Component-wise statistics of decompositions against shuffled labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlStats {
    pub shuffles: usize,
    pub mean: PidDecomposition,
    pub sd: PidDecomposition,
    /// `mean + 4 sd` per component.
    pub floor: PidDecomposition,
}

fn to_array(p: &PidDecomposition) -> [f64; 5] {
    [p.redundancy, p.unique_s1, p.unique_s2, p.synergy, p.joint_mi]
}

fn from_array(a: [f64; 5]) -> PidDecomposition {
    PidDecomposition { redundancy: a[0], unique_s1: a[1], unique_s2: a[2], synergy: a[3], joint_mi: a[4] }
}

impl ControlStats {
    /// Per component (redundancy, unique_s1, unique_s2, synergy, joint_mi):
    /// is `p` at or below the floor?
    pub fn within_floor(&self, p: &PidDecomposition) -> [bool; 5] {
        let (v, f) = (to_array(p), to_array(&self.floor));
        std::array::from_fn(|k| v[k] <= f[k] + FLOOR_SLACK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidDiagnosticReport {
    pub decomposition: PidDecomposition,
    pub bins: usize,
    pub dims: Vec<usize>,
    pub samples: usize,
    pub control: ControlStats,
}

/// Decompose `(labels; sym1, sym2)` and build a shuffled-label control from
/// `shuffles` independent label permutations.
pub fn decompose_with_control(
    sym1: &[usize],
    sym2: &[usize],
    labels: &[usize],
    shuffles: usize,
    seed: u64,
) -> Result<(PidDecomposition, ControlStats)> {
    let decomposition = decompose(&estimate_joint(sym1, sym2, labels)?);
    let draws: Vec<[f64; 5]> = (0..shuffles.max(2) as u64)
        .into_par_iter()
        .map(|k| {
            let mut perm = labels.to_vec();
            perm.shuffle(&mut rng::stream(&[seed, rng::tag::CONTROL, k]));
            Ok(to_array(&decompose(&estimate_joint(sym1, sym2, &perm)?)))
        })
        .collect::<Result<_>>()?;
    let m = draws.len() as f64;
    let mean: [f64; 5] = std::array::from_fn(|k| draws.iter().map(|d| d[k]).sum::<f64>() / m);
    let sd: [f64; 5] = std::array::from_fn(|k| {
        (draws.iter().map(|d| (d[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    });
    let floor = std::array::from_fn(|k| mean[k] + FLOOR_SIGMAS * sd[k]);
    let control = ControlStats { shuffles: draws.len(), mean: from_array(mean), sd: from_array(sd), floor: from_array(floor) };
    Ok((decomposition, control))
}

fn top_variance_dims(a: &Array2<f64>, b: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let both = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
    let var = both.var_axis(Axis(0), 0.0);
    if k > var.len() {
        return Err(Error::InvalidArgument(format!("{k} dims requested from {}-d encoder", var.len())));
    }
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&i, &j| var[j].total_cmp(&var[i]).then(i.cmp(&j)));
    let mut dims = order[..k].to_vec();
    dims.sort_unstable();
    Ok(dims)
}

/// Encode two augmented views of every sample, quantize each view's encoder
/// output, and decompose the information the views carry about the labels.
pub fn pid_diagnostic(
    encoder: &(impl Encoder + Sync),
    data: &[ImageSample],
    policy: &AugmentPolicy,
    spec: &DiagnosticSpec,
    seed: u64,
) -> Result<PidDiagnosticReport> {
    if data.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    if spec.samples > 0 && spec.samples < data.len() {
        idx.shuffle(&mut rng::stream(&[seed, rng::tag::DIAGNOSTIC, u64::MAX]));
        idx.truncate(spec.samples);
        idx.sort_unstable();
    }
    let (va, vb): (Vec<ImageSample>, Vec<ImageSample>) = idx
        .par_iter()
        .map(|&i| make_views(&data[i], policy, &mut rng::stream(&[seed, rng::tag::DIAGNOSTIC, i as u64])))
        .unzip();
    let ea = encoder.encode_samples(&va)?;
    let eb = encoder.encode_samples(&vb)?;
    let dims = match &spec.dims {
        DimSelect::TopVariance(k) => top_variance_dims(&ea, &eb, *k)?,
        DimSelect::Explicit(d) => d.clone(),
    };
    let sym1 = quantize_embeddings(&EmbeddingBatch::new(ea)?, &dims, spec.bins)?;
    let sym2 = quantize_embeddings(&EmbeddingBatch::new(eb)?, &dims, spec.bins)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
    let (decomposition, control) = decompose_with_control(&sym1, &sym2, &labels, spec.shuffles, seed)?;
    let report = PidDiagnosticReport { decomposition, bins: spec.bins, dims, samples: labels.len(), control };
    debug_assert!(report.decomposition.sum_gap().abs() <= 1e-9);
    Ok(report)
}
