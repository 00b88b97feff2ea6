//! The `PIDSSL01` checkpoint container.
//!
//! All integers are little-endian `u64` unless noted; all reals are
//! little-endian `f64`.
//!
//! ```text
//! "PIDSSL01"                      magic
//! u32 version
//! u8  phase                       1 or 2
//! u64 epochs completed
//! u64 seed                        all view/shuffle streams derive from this
//! u64 L, u64 x (L+1) widths       MlpSpec
//! u8  activation, u64 encoder_cut
//! L x (weight in*out, bias out)   params
//! u64 step, f64 lr b1 b2 eps wd   Adam scalars
//! L x (m), L x (v)                Adam moments, shaped like params
//! u8  target kind                 0 none, 1 zero, 2 gaussian, 3 average
//! [u64 d, f64 x d*d]              target matrix for kinds 2 and 3
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::losses::{OffDiagonalTarget, TargetKind};
use crate::network::{Activation, AdamState, Layer, MlpSpec, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PIDSSL01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: u8,
    pub epochs_completed: usize,
    pub seed: u64,
    pub params: ModelParams,
    pub adam: AdamState,
    pub target: Option<OffDiagonalTarget>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn layer(&mut self, l: &Layer) {
        l.weight.iter().chain(l.bias.iter()).for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.at..end];
                self.at = end;
                Ok(out)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.at))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("count overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn layer(&mut self, rows: usize, cols: usize) -> Result<Layer> {
        let w = self.reals(rows * cols)?;
        let b = self.reals(cols)?;
        Ok(Layer { weight: Array2::from_shape_vec((rows, cols), w).unwrap(), bias: Array1::from_vec(b) })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.0.extend(VERSION.to_le_bytes());
        w.u8(self.phase);
        w.u64(self.epochs_completed as u64);
        w.u64(self.seed);
        let spec = &self.params.spec;
        w.u64(spec.num_layers() as u64);
        spec.layer_widths.iter().for_each(|&k| w.u64(k as u64));
        w.u8(match spec.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        w.u64(spec.encoder_cut as u64);
        self.params.layers.iter().for_each(|l| w.layer(l));
        let a = &self.adam;
        w.u64(a.step);
        [a.lr, a.beta1, a.beta2, a.eps, a.weight_decay].into_iter().for_each(|v| w.f64(v));
        a.m.iter().chain(&a.v).for_each(|l| w.layer(l));
        match &self.target {
            None => w.u8(0),
            Some(t) => {
                w.u8(match t.kind() {
                    TargetKind::Zero => 1,
                    TargetKind::Gaussian => 2,
                    TargetKind::Average => 3,
                });
                if let Some(m) = t.matrix() {
                    w.u64(m.nrows() as u64);
                    m.iter().for_each(|&v| w.f64(v));
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic, not a PIDSSL01 checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let phase = r.u8()?;
        if phase != 1 && phase != 2 {
            return Err(Error::Checkpoint(format!("bad phase tag {phase}")));
        }
        let epochs_completed = r.usize()?;
        let seed = r.u64()?;
        let num_layers = r.usize()?;
        if num_layers == 0 || num_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {num_layers}")));
        }
        let layer_widths = (0..=num_layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::Checkpoint(format!("bad activation tag {other}"))),
        };
        let encoder_cut = r.usize()?;
        let spec = MlpSpec { layer_widths, activation, encoder_cut };
        spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shapes: Vec<(usize, usize)> = spec.layer_widths.windows(2).map(|w| (w[0], w[1])).collect();
        let read_layers = |r: &mut Reader| shapes.iter().map(|&(i, o)| r.layer(i, o)).collect::<Result<Vec<_>>>();
        let layers = read_layers(&mut r)?;
        let step = r.u64()?;
        let [lr, beta1, beta2, eps, weight_decay] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let m = read_layers(&mut r)?;
        let v = read_layers(&mut r)?;
        let kind = r.u8()?;
        let mut matrix = || -> Result<Array2<f64>> {
            let d = r.usize()?;
            let vals = r.reals(d.saturating_mul(d))?;
            Ok(Array2::from_shape_vec((d, d), vals).unwrap())
        };
        let target = match kind {
            0 => None,
            1 => Some(OffDiagonalTarget::zero()),
            2 => Some(OffDiagonalTarget::gaussian(matrix()?)?),
            3 => Some(OffDiagonalTarget::average(matrix()?)?),
            other => return Err(Error::Checkpoint(format!("bad target tag {other}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let params = ModelParams { spec, layers };
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(Self {
            phase,
            epochs_completed,
            seed,
            params,
            adam: AdamState { m, v, step, lr, beta1, beta2, eps, weight_decay },
            target,
        })
    }

    /// Write atomically: a sibling temp file is written, synced, then renamed.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of the weights alone, used to check that evaluation passes
/// leave an encoder untouched.
pub fn params_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for l in &params.layers {
        for v in l.weight.iter().chain(l.bias.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::sample_gaussian_target;
    use crate::network::init_params;

    fn ckpt(target: Option<OffDiagonalTarget>) -> Checkpoint {
        let params = init_params(&MlpSpec::with_projector(&[6, 5], 4), 3).unwrap();
        let mut adam = AdamState::new(&params, 1e-3, 1e-6);
        adam.step = 7;
        adam.m[0].weight.fill(0.25);
        Checkpoint { phase: 2, epochs_completed: 5, seed: 11, params, adam, target }
    }

    #[test]
    fn round_trip_all_target_kinds() {
        let targets = [
            None,
            Some(OffDiagonalTarget::zero()),
            Some(sample_gaussian_target(4, 1.0, 2).unwrap()),
            Some(OffDiagonalTarget::average(Array2::from_elem((4, 4), 0.125)).unwrap()),
        ];
        for t in targets {
            let c = ckpt(t);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = ckpt(None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = ckpt(None);
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(params_hash(&c.params), params_hash(&Checkpoint::load(&p).unwrap().params));
    }
}
