//! Dataset ingestion: idx-like binary, CSV, and synthetic manifests.
//!
//! idx-like layout (big-endian header, like the classic small-image
//! archives):
//!
//! ```text
//! 00 00 08 nd          magic; nd = 3 (n, h, w) or 4 (n, h, w, c)
//! u32 x nd             dimensions
//! u8  x n*h*w*c        pixels, row-major HWC, scaled by 1/255
//! u8  x n              labels
//! ```
//!
//! CSV layout: one sample per line, `label,p0,p1,...`, pixels already in
//! `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::{rng, Error, Result};

/// Standard deviation of every synthetic class template.
pub const TEMPLATE_STD: f64 = 0.2;

const TEMPLATE_WAVES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Idx,
    Csv { h: usize, w: usize, c: usize },
    SyntheticManifest,
}

/// Synthetic dataset: `num_classes` smooth random templates, each observed
/// `per_class` times under iid Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Signal-to-noise ratio; when set it overrides `noise_std` with
    /// `TEMPLATE_STD / snr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    /// Each sample is its class template circularly shifted by up to this
    /// many pixels in each direction; 0 disables.
    #[serde(default)]
    pub max_shift: usize,
}

fn one() -> usize {
    1
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, height: usize, width: usize, channels: usize, seed: u64) -> Self {
        Self { seed, classes, per_class, height, width, channels, noise_std: 0.0, snr: None, max_shift: 0 }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self.snr = None;
        self
    }

    pub fn with_snr(mut self, snr: f64) -> Self {
        self.snr = Some(snr);
        self
    }

    pub fn with_shift(mut self, max_shift: usize) -> Self {
        self.max_shift = max_shift;
        self
    }

    pub fn effective_noise(&self) -> f64 {
        self.snr.map_or(self.noise_std, |s| TEMPLATE_STD / s)
    }
}

/// Where a run gets its samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    Csv { path: PathBuf, height: usize, width: usize, #[serde(default = "one")] channels: usize },
    Idx { path: PathBuf },
    Manifest { path: PathBuf },
}

impl DatasetSpec {
    /// Load the dataset; for synthetic data `split` selects an independent
    /// noise draw over the same templates (0 = training split).
    pub fn load(&self, split: u64) -> Result<Vec<ImageSample>> {
        match self {
            DatasetSpec::Synthetic(cfg) => synth_split(cfg, split),
            DatasetSpec::Csv { path, height, width, channels } => {
                load_dataset(path, DatasetFormat::Csv { h: *height, w: *width, c: *channels })
            }
            DatasetSpec::Idx { path } => load_dataset(path, DatasetFormat::Idx),
            DatasetSpec::Manifest { path } => {
                manifest(path)?.load(split)
            }
        }
    }
}

fn manifest(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path)?;
    let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let DatasetSpec::Manifest { .. } = spec {
        return Err(Error::Config("a manifest may not point at another manifest".into()));
    }
    Ok(spec)
}

/// Read samples from `path`; order follows the file.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<ImageSample>> {
    let path = path.as_ref();
    match format {
        DatasetFormat::Idx => parse_idx(&fs::read(path)?),
        DatasetFormat::Csv { h, w, c } => parse_csv(&fs::read_to_string(path)?, h, w, c),
        DatasetFormat::SyntheticManifest => manifest(path)?.load(0),
    }
}

fn parse_idx(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    let err = |offset: usize, message: &str| Error::Format { offset, message: message.into() };
    if bytes.is_empty() {
        return Err(err(0, "empty file"));
    }
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(err(0, "bad magic, expected 00 00 08 nd"));
    }
    let nd = bytes[3] as usize;
    if nd != 3 && nd != 4 {
        return Err(err(3, "expected 3 or 4 dimensions"));
    }
    let mut dims = Vec::with_capacity(nd);
    for k in 0..nd {
        let at = 4 + 4 * k;
        let raw = bytes.get(at..at + 4).ok_or_else(|| err(at, "truncated header"))?;
        dims.push(u32::from_be_bytes(raw.try_into().unwrap()) as usize);
    }
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let c = dims.get(3).copied().unwrap_or(1);
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(err(4, "zero dimension"));
    }
    let header = 4 + 4 * nd;
    let px = n * h * w * c;
    let expected = header + px + n;
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), &format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let labels = &bytes[header + px..];
    (0..n)
        .map(|i| {
            let start = header + i * h * w * c;
            let pixels = bytes[start..start + h * w * c].iter().map(|&b| b as f64 / 255.0).collect();
            ImageSample::new(h, w, c, pixels, labels[i] as usize)
        })
        .collect()
}

fn parse_csv(text: &str, h: usize, w: usize, c: usize) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { line: line_no, message };
        let mut fields = line.split(',').map(str::trim);
        let label = fields
            .next()
            .unwrap()
            .parse::<usize>()
            .map_err(|e| perr(format!("bad label: {e}")))?;
        let pixels = fields
            .map(|f| f.parse::<f64>().map_err(|e| perr(format!("bad pixel `{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if pixels.len() != h * w * c {
            return Err(perr(format!("expected {} pixels, found {}", h * w * c, pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(perr("pixel outside [0, 1]".into()));
        }
        out.push(ImageSample::new(h, w, c, pixels, label)?);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, message: "empty file".into() });
    }
    Ok(out)
}

fn shape_of(samples: &[ImageSample]) -> Result<(usize, usize, usize)> {
    let first = samples.first().ok_or(Error::EmptyInput)?;
    if samples.iter().any(|s| (s.h, s.w, s.c) != (first.h, first.w, first.c)) {
        return Err(Error::InvalidShape("samples have mixed shapes".into()));
    }
    Ok((first.h, first.w, first.c))
}

/// Write the CSV format. Pixel values are printed losslessly.
pub fn save_csv(path: impl AsRef<Path>, samples: &[ImageSample]) -> Result<()> {
    shape_of(samples)?;
    let mut text = String::new();
    for s in samples {
        text.push_str(&s.label.to_string());
        for p in &s.pixels {
            text.push(',');
            text.push_str(&p.to_string());
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Write the idx-like format. Pixels are quantized to multiples of 1/255.
pub fn save_idx(path: impl AsRef<Path>, samples: &[ImageSample]) -> Result<()> {
    let (h, w, c) = shape_of(samples)?;
    if samples.iter().any(|s| s.label > u8::MAX as usize) {
        return Err(Error::InvalidArgument("idx labels must fit in a byte".into()));
    }
    let mut bytes = vec![0, 0, 0x08, if c == 1 { 3 } else { 4 }];
    let mut dims = vec![samples.len(), h, w];
    if c != 1 {
        dims.push(c);
    }
    for d in dims {
        bytes.extend((d as u32).to_be_bytes());
    }
    for s in samples {
        bytes.extend(s.pixels.iter().map(|p| (p * 255.0).round() as u8));
    }
    bytes.extend(samples.iter().map(|s| s.label as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Low-frequency random field with zero mean and unit standard deviation.
fn template_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..TEMPLATE_WAVES)
        .map(|_| {
            let fy = rng.random_range(0..=2) as f64;
            let fx = rng.random_range(0..=2) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.5..1.5);
            (fy, fx, phase, amp)
        })
        .collect();
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum()
        })
        .collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let sd = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64).sqrt();
    field.iter_mut().for_each(|v| *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 });
    field
}

/// Class templates for a synthetic config, each `h*w*c` in `[0, 1]`.
fn templates(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    (0..cfg.classes)
        .map(|k| {
            let mut rng = rng::stream(&[cfg.seed, rng::tag::TEMPLATE, k as u64]);
            let channels: Vec<Vec<f64>> = (0..cfg.channels).map(|_| template_field(cfg.height, cfg.width, &mut rng)).collect();
            (0..cfg.height * cfg.width)
                .flat_map(|i| channels.iter().map(move |ch| (0.5 + TEMPLATE_STD * ch[i]).clamp(0.0, 1.0)))
                .collect()
        })
        .collect()
}

/// Circular shift of an HWC image by `(dy, dx)`.
fn shift(img: &[f64], h: usize, w: usize, c: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        for x in 0..w {
            let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
            out[(y * w + x) * c..][..c].copy_from_slice(&img[(sy * w + sx) * c..][..c]);
        }
    }
    out
}

/// The training split of a synthetic dataset: samples ordered class-major.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    synth_split(cfg, 0)
}

/// An independent noise draw of the synthetic dataset over the same class
/// templates.
pub fn synth_split(cfg: &SynthConfig, split: u64) -> Result<Vec<ImageSample>> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::InvalidArgument("synthetic dataset sizes must be positive".into()));
    }
    let noise = cfg.effective_noise();
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {noise}")));
    }
    let normal = if noise > 0.0 { Some(Normal::new(0.0, noise).expect("positive std")) } else { None };
    let temps = templates(cfg);
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (k, t) in temps.iter().enumerate() {
        for i in 0..cfg.per_class {
            let mut rng = rng::stream(&[cfg.seed, rng::tag::NOISE, split, k as u64, i as u64]);
            let shifted;
            let t = if cfg.max_shift > 0 {
                let s = cfg.max_shift as i64;
                let (dy, dx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
                shifted = shift(t, cfg.height, cfg.width, cfg.channels, dy, dx);
                &shifted
            } else {
                t
            };
            let pixels = t
                .iter()
                .map(|&p| match &normal {
                    Some(nd) => (p + nd.sample(&mut rng)).clamp(0.0, 1.0),
                    None => p,
                })
                .collect();
            out.push(ImageSample::new(cfg.height, cfg.width, cfg.channels, pixels, k)?);
        }
    }
    Ok(out)
}
