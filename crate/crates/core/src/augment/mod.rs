//! Two-view stochastic augmentation.
//!
//! Each view is an independent draw of: random resized crop (bilinear,
//! half-pixel centers) -> horizontal flip -> color jitter -> grayscale ->
//! optional Gaussian pixel noise, clamped to `[0, 1]`.

mod dataset;

pub use dataset::{
    load_dataset, save_csv, save_idx, synth_dataset, synth_split, DatasetFormat, DatasetSpec,
    SynthConfig, TEMPLATE_STD,
};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// An `h x w x c` image with pixels in `[0, 1]`, stored row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f64>, label: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidShape(format!("image shape {h}x{w}x{c}")));
        }
        if pixels.len() != h * w * c {
            return Err(Error::shape(h * w * c, pixels.len()));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { h, w, c, pixels, label })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.w + x) * self.c + ch]
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    fn luma(&self, y: usize, x: usize) -> f64 {
        if self.c >= 3 {
            0.299 * self.at(y, x, 0) + 0.587 * self.at(y, x, 1) + 0.114 * self.at(y, x, 2)
        } else {
            self.at(y, x, 0)
        }
    }
}

/// Stack flattened images into an `n x (h*w*c)` matrix.
pub fn to_matrix(samples: &[ImageSample]) -> Array2<f64> {
    let d = samples.first().map_or(0, ImageSample::dim);
    let mut m = Array2::zeros((samples.len(), d));
    for (mut row, s) in m.rows_mut().into_iter().zip(samples) {
        row.iter_mut().zip(&s.pixels).for_each(|(o, &p)| *o = p);
    }
    m
}

/// Named policy presets usable from config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Standard,
    Heavy,
    /// No augmentation at all.
    Identity,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(PolicyKind::Standard),
            "heavy" => Ok(PolicyKind::Heavy),
            "identity" => Ok(PolicyKind::Identity),
            other => Err(Error::Config(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub name: String,
    /// Crop area as a fraction of the image, `(min, max)`.
    pub crop_scale: (f64, f64),
    /// Crop width / height ratio, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub grayscale_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub jitter_prob: f64,
    /// Standard deviation of additive pixel noise, `0` to disable.
    pub noise_std: f64,
}

impl AugmentPolicy {
    pub fn standard() -> Self {
        Self {
            name: "standard".into(),
            crop_scale: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            grayscale_prob: 0.1,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_prob: 0.8,
            noise_std: 0.0,
        }
    }

    pub fn heavy() -> Self {
        Self {
            name: "heavy".into(),
            crop_scale: (0.05, 0.4),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            grayscale_prob: 0.3,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            jitter_prob: 1.0,
            noise_std: 0.1,
        }
    }

    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            crop_scale: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            grayscale_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            jitter_prob: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn from_kind(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Standard => Self::standard(),
            PolicyKind::Heavy => Self::heavy(),
            PolicyKind::Identity => Self::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.grayscale_prob, self.jitter_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("augmentation probabilities must lie in [0, 1]".into()));
        }
        for (name, (lo, hi)) in [("crop_scale", self.crop_scale), ("aspect_range", self.aspect_range)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} must satisfy 0 < min <= max")));
            }
        }
        if self.crop_scale.1 > 1.0 {
            return Err(Error::InvalidArgument("crop_scale max must be <= 1".into()));
        }
        if [self.brightness, self.contrast, self.saturation, self.noise_std].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("jitter strengths must be >= 0".into()));
        }
        Ok(())
    }
}

/// The RNG stream for the views of one sample at one epoch.
pub fn view_stream(seed: u64, phase: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    rng::stream(&[seed, rng::tag::VIEWS, phase, epoch, index])
}

/// Mirror an image left-right.
pub fn flip_horizontal(img: &ImageSample) -> ImageSample {
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..img.c {
                out.pixels[(y * img.w + x) * img.c + ch] = img.at(y, img.w - 1 - x, ch);
            }
        }
    }
    out
}

/// Crop `(y0, x0, ch, cw)` and resize back to `h x w` bilinearly.
fn resized_crop(img: &ImageSample, y0: usize, x0: usize, ch: usize, cw: usize) -> ImageSample {
    let (h, w, c) = (img.h, img.w, img.c);
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut pixels = vec![0.0; h * w * c];
    for oy in 0..h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(ch - 1);
        let ty = fy - y_lo as f64;
        for ox in 0..w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(cw - 1);
            let tx = fx - x_lo as f64;
            for k in 0..c {
                let p = |yy: usize, xx: usize| img.at(y0 + yy, x0 + xx, k);
                let top = p(y_lo, x_lo) * (1.0 - tx) + p(y_lo, x_hi) * tx;
                let bottom = p(y_hi, x_lo) * (1.0 - tx) + p(y_hi, x_hi) * tx;
                pixels[(oy * w + ox) * c + k] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    ImageSample { pixels, ..img.clone() }
}

fn random_resized_crop<R: Rng>(img: &ImageSample, policy: &AugmentPolicy, rng: &mut R) -> ImageSample {
    let area = (img.h * img.w) as f64;
    let (lo, hi) = policy.crop_scale;
    let (log_a, log_b) = (policy.aspect_range.0.ln(), policy.aspect_range.1.ln());
    for _ in 0..10 {
        let target = area * if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let ratio = if log_b > log_a { rng.random_range(log_a..=log_b) } else { log_a }.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= img.w && ch <= img.h {
            let y0 = rng.random_range(0..=img.h - ch);
            let x0 = rng.random_range(0..=img.w - cw);
            return resized_crop(img, y0, x0, ch, cw);
        }
    }
    img.clone()
}

fn color_jitter<R: Rng>(img: &mut ImageSample, policy: &AugmentPolicy, rng: &mut R) {
    let factor = |rng: &mut R, s: f64| {
        if s > 0.0 {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
        } else {
            1.0
        }
    };
    let b = factor(rng, policy.brightness);
    let c = factor(rng, policy.contrast);
    let s = factor(rng, policy.saturation);
    img.pixels.iter_mut().for_each(|p| *p = (*p * b).clamp(0.0, 1.0));
    let mean = (0..img.h)
        .flat_map(|y| (0..img.w).map(move |x| (y, x)))
        .map(|(y, x)| img.luma(y, x))
        .sum::<f64>()
        / (img.h * img.w) as f64;
    img.pixels.iter_mut().for_each(|p| *p = ((*p - mean) * c + mean).clamp(0.0, 1.0));
    if img.c >= 3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let g = img.luma(y, x);
                for k in 0..img.c {
                    let i = (y * img.w + x) * img.c + k;
                    img.pixels[i] = (g + (img.pixels[i] - g) * s).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn grayscale(img: &mut ImageSample) {
    if img.c < 3 {
        return;
    }
    for y in 0..img.h {
        for x in 0..img.w {
            let g = img.luma(y, x);
            for k in 0..img.c {
                img.pixels[(y * img.w + x) * img.c + k] = g;
            }
        }
    }
}

/// One augmented view. Every random decision is drawn even when its branch is
/// not taken, so the number of draws per view does not depend on outcomes
/// before the noise stage.
pub fn augment_once<R: Rng>(img: &ImageSample, policy: &AugmentPolicy, rng: &mut R) -> ImageSample {
    let mut out = random_resized_crop(img, policy, rng);
    if rng.random::<f64>() < policy.flip_prob {
        out = flip_horizontal(&out);
    }
    if rng.random::<f64>() < policy.jitter_prob {
        color_jitter(&mut out, policy, rng);
    }
    if rng.random::<f64>() < policy.grayscale_prob {
        grayscale(&mut out);
    }
    if policy.noise_std > 0.0 {
        let normal = Normal::new(0.0, policy.noise_std).expect("validated std");
        out.pixels.iter_mut().for_each(|p| *p += normal.sample(rng));
    }
    out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    out
}

/// Two independent augmented views of `sample`. Labels are preserved.
pub fn make_views<R: Rng>(sample: &ImageSample, policy: &AugmentPolicy, rng: &mut R) -> (ImageSample, ImageSample) {
    let a = augment_once(sample, policy, rng);
    let b = augment_once(sample, policy, rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, c: usize) -> ImageSample {
        let mut r = rng::stream(&[seed]);
        let pixels = (0..8 * 8 * c).map(|_| r.random::<f64>()).collect();
        ImageSample::new(8, 8, c, pixels, 3).unwrap()
    }

    #[test]
    fn identity_policy_returns_the_sample() {
        let s = sample(1, 3);
        let (a, b) = make_views(&s, &AugmentPolicy::identity(), &mut rng::stream(&[2]));
        assert_eq!(a, s);
        assert_eq!(b, s);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample(4, 3);
        assert_ne!(flip_horizontal(&s), s);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn views_preserve_label_range_and_shape() {
        for policy in [AugmentPolicy::standard(), AugmentPolicy::heavy()] {
            policy.validate().unwrap();
            for seed in 0..50 {
                let s = sample(seed, if seed % 2 == 0 { 1 } else { 3 });
                let (a, b) = make_views(&s, &policy, &mut view_stream(seed, 1, 0, 0));
                for v in [&a, &b] {
                    assert_eq!(v.label, s.label);
                    assert_eq!((v.h, v.w, v.c), (s.h, s.w, s.c));
                    assert!(v.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
                }
            }
        }
    }

    #[test]
    fn views_are_deterministic_per_stream() {
        let s = sample(9, 3);
        let p = AugmentPolicy::heavy();
        let a = make_views(&s, &p, &mut view_stream(5, 1, 2, 3));
        let b = make_views(&s, &p, &mut view_stream(5, 1, 2, 3));
        let c = make_views(&s, &p, &mut view_stream(5, 1, 2, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn grayscale_replicates_luma() {
        let mut s = sample(3, 3);
        grayscale(&mut s);
        for px in s.pixels.chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::standard();
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::standard();
        p.crop_scale = (0.5, 0.2);
        assert!(p.validate().is_err());
        assert_eq!("heavy".parse::<PolicyKind>().unwrap(), PolicyKind::Heavy);
        assert!("odd".parse::<PolicyKind>().is_err());
    }
}
