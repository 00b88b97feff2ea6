//! Redundancy-reduction objectives and their analytic gradients.
//!
//! The Barlow-Twins loss on the cross-correlation `C` of two views is
//!
//! ```text
//! L = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} (C_ij - M_ij)^2
//! ```
//!
//! where the off-diagonal target `M` is zero (plain redundancy reduction), a
//! frozen Gaussian matrix `G`, or the running average `C^Ave` collected with
//! a fixed network. The W-MSE family whitens each view with a Cholesky
//! factor, L2-normalizes the rows, and takes the mean squared distance
//! between positive pairs; its variants add the same off-diagonal penalty on
//! the cross-correlation of the whitened, normalized embeddings.
//!
//! Gradients are taken with respect to the raw (pre-standardization,
//! pre-whitening) embeddings.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, CrossCorrelation, EmbeddingBatch, Jitter};
use crate::{rng, Error, Result};

/// Off-diagonal weight of the original redundancy-reduction loss.
pub const PHASE1_LAMBDA: f64 = 5e-3;
/// Off-diagonal weight used while adding synergy.
pub const PHASE2_LAMBDA: f64 = 0.1;
/// Default variance guard for column standardization.
pub const DEFAULT_EPS: f64 = 1e-5;

const ROW_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Zero,
    Gaussian,
    Average,
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetKind::Zero => "zero",
            TargetKind::Gaussian => "gaussian",
            TargetKind::Average => "average",
        })
    }
}

/// What the off-diagonal entries of `C` are pulled toward. Diagonal entries
/// of the stored matrix are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct OffDiagonalTarget {
    kind: TargetKind,
    matrix: Option<Array2<f64>>,
}

impl OffDiagonalTarget {
    pub fn zero() -> Self {
        Self { kind: TargetKind::Zero, matrix: None }
    }

    pub fn gaussian(matrix: Array2<f64>) -> Result<Self> {
        Self::with_matrix(TargetKind::Gaussian, matrix)
    }

    /// Average target; entries must lie in `[-1, 1]`.
    pub fn average(matrix: Array2<f64>) -> Result<Self> {
        if matrix.iter().any(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument(
                "average target entries must lie in [-1, 1]".into(),
            ));
        }
        Self::with_matrix(TargetKind::Average, matrix)
    }

    fn with_matrix(kind: TargetKind, matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidShape(format!(
                "target must be square, got {:?}",
                matrix.dim()
            )));
        }
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { kind, matrix: Some(matrix) })
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn matrix(&self) -> Option<&Array2<f64>> {
        self.matrix.as_ref()
    }

    pub fn dim(&self) -> Option<usize> {
        self.matrix.as_ref().map(Array2::nrows)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.matrix.as_ref().map_or(0.0, |m| m[[i, j]])
    }

    /// Copy with every entry clipped to `[-1, 1]`, the reachable range of a
    /// correlation.
    pub fn clamped(&self) -> Self {
        Self {
            kind: self.kind,
            matrix: self.matrix.as_ref().map(|m| m.mapv(|v| v.clamp(-1.0, 1.0))),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::shape(format!("{d}x{d} target"), format!("{k}x{k}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtLossConfig {
    pub lambda: f64,
    pub eps: f64,
}

impl Default for BtLossConfig {
    fn default() -> Self {
        Self { lambda: PHASE1_LAMBDA, eps: DEFAULT_EPS }
    }
}

impl BtLossConfig {
    pub fn phase2() -> Self {
        Self { lambda: PHASE2_LAMBDA, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss value split into its two terms, plus the correlation it was computed
/// from. For the W-MSE family `diagonal` holds the MSE term and `c` the
/// cross-correlation of the whitened, normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub diagonal: f64,
    pub off_diagonal: f64,
    pub c: CrossCorrelation,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub terms: LossTerms,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

fn check_pair(za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<()> {
    if za.data().dim() != zb.data().dim() {
        return Err(Error::shape(
            format!("{:?}", za.data().dim()),
            format!("{:?}", zb.data().dim()),
        ));
    }
    Ok(())
}

/// Diagonal term `sum (1 - C_ii)^2`.
fn diagonal_term(c: &Array2<f64>) -> f64 {
    c.diag().iter().map(|v| (1.0 - v) * (1.0 - v)).sum()
}

/// Unweighted off-diagonal term `sum_{i != j} (C_ij - M_ij)^2`.
fn off_diagonal_term(c: &Array2<f64>, target: &OffDiagonalTarget) -> f64 {
    c.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|((i, j), &v)| {
            let e = v - target.value(i, j);
            e * e
        })
        .sum()
}

/// `dL/dC` for `diag_weight * diagonal + lambda * off_diagonal`.
fn correlation_grad(c: &Array2<f64>, diag_weight: f64, lambda: f64, target: &OffDiagonalTarget) -> Array2<f64> {
    Array2::from_shape_fn(c.raw_dim(), |(i, j)| {
        if i == j {
            -2.0 * diag_weight * (1.0 - c[[i, i]])
        } else {
            2.0 * lambda * (c[[i, j]] - target.value(i, j))
        }
    })
}

/// Barlow-Twins loss with a configurable off-diagonal target.
pub fn bt_loss(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    cfg: &BtLossConfig,
    target: &OffDiagonalTarget,
) -> Result<LossTerms> {
    check_pair(za, zb)?;
    cfg.validate()?;
    target.check_dim(za.d())?;
    let c = linalg::cross_correlation_eps(za, zb, cfg.eps)?;
    let diagonal = diagonal_term(&c.c);
    let off_diagonal = cfg.lambda * off_diagonal_term(&c.c, target);
    Ok(LossTerms { total: diagonal + off_diagonal, diagonal, off_diagonal, c })
}

/// [`bt_loss`] together with its gradients with respect to both raw inputs.
pub fn bt_loss_grad(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    cfg: &BtLossConfig,
    target: &OffDiagonalTarget,
) -> Result<LossGrad> {
    check_pair(za, zb)?;
    cfg.validate()?;
    target.check_dim(za.d())?;
    let sa = linalg::standardize(za.view(), cfg.eps);
    let sb = linalg::standardize(zb.view(), cfg.eps);
    let c = linalg::correlation_of(&sa, &sb);
    let n = za.n() as f64;
    let g = correlation_grad(&c, 1.0, cfg.lambda, target);
    // C = Za^T Zb / n
    let grad_za = sb.z.dot(&g.t()) / n;
    let grad_zb = sa.z.dot(&g) / n;
    let diagonal = diagonal_term(&c);
    let off_diagonal = cfg.lambda * off_diagonal_term(&c, target);
    Ok(LossGrad {
        grad_a: sa.backward(grad_za.view()),
        grad_b: sb.backward(grad_zb.view()),
        terms: LossTerms {
            total: diagonal + off_diagonal,
            diagonal,
            off_diagonal,
            c: CrossCorrelation {
                c,
                source_batch_size: za.n(),
                degenerate: sa.any_degenerate() || sb.any_degenerate(),
            },
        },
    })
}

/// Draw a frozen Gaussian target: off-diagonal entries iid `N(0, sigma^2)`,
/// diagonal zero.
pub fn sample_gaussian_target(d: usize, sigma: f64, seed: u64) -> Result<OffDiagonalTarget> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("gaussian target needs d >= 2, got {d}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::stream(&[seed, rng::tag::GAUSSIAN_TARGET, d as u64]);
    let m = Array2::from_shape_fn((d, d), |(i, j)| {
        let v = normal.sample(&mut rng);
        if i == j {
            0.0
        } else {
            v
        }
    });
    OffDiagonalTarget::gaussian(m)
}

/// Running sum of cross-correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageAccumulator {
    sum: Array2<f64>,
    count: usize,
}

impl AverageAccumulator {
    pub fn new(d: usize) -> Self {
        Self { sum: Array2::zeros((d, d)), count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn accumulate(&mut self, c: &CrossCorrelation) -> Result<()> {
        if c.c.dim() != self.sum.dim() {
            return Err(Error::shape(format!("{:?}", self.sum.dim()), format!("{:?}", c.c.dim())));
        }
        self.sum += &c.c;
        self.count += 1;
        Ok(())
    }

    /// Combine two partial accumulators (sums add, counts add).
    pub fn merge(&mut self, other: &AverageAccumulator) -> Result<()> {
        if other.sum.dim() != self.sum.dim() {
            return Err(Error::shape(format!("{:?}", self.sum.dim()), format!("{:?}", other.sum.dim())));
        }
        self.sum += &other.sum;
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> Result<Array2<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(&self.sum / self.count as f64)
    }

    pub fn to_target(&self) -> Result<OffDiagonalTarget> {
        OffDiagonalTarget::average(self.mean()?)
    }
}

/// Functional form of [`AverageAccumulator::accumulate`].
pub fn accumulate_average(mut acc: AverageAccumulator, c: &CrossCorrelation) -> Result<AverageAccumulator> {
    acc.accumulate(c)?;
    Ok(acc)
}

struct WmseForward {
    wa: linalg::Whitened,
    wb: linalg::Whitened,
    ua: linalg::RowNormalized,
    ub: linalg::RowNormalized,
    mse: f64,
}

fn wmse_forward(za: &EmbeddingBatch, zb: &EmbeddingBatch, jitter: Jitter) -> Result<WmseForward> {
    check_pair(za, zb)?;
    let wa = linalg::whiten(za.view(), jitter)?;
    let wb = linalg::whiten(zb.view(), jitter)?;
    let ua = linalg::normalize_rows(wa.y.view(), ROW_NORM_EPS);
    let ub = linalg::normalize_rows(wb.y.view(), ROW_NORM_EPS);
    let n = za.n() as f64;
    let diff = &ua.u - &ub.u;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(WmseForward { wa, wb, ua, ub, mse })
}

/// Mean over rows of `||u_a - u_b||^2`, where `u` are the L2-normalized rows
/// of each view after Cholesky whitening.
pub fn wmse_loss(za: &EmbeddingBatch, zb: &EmbeddingBatch, jitter: Jitter) -> Result<f64> {
    Ok(wmse_forward(za, zb, jitter)?.mse)
}

/// W-MSE plus `lambda * sum_{i != j} (C_ij - M_ij)^2` on the cross-correlation
/// of the whitened, normalized embeddings.
pub fn wmse_variant_loss(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    cfg: &BtLossConfig,
    target: &OffDiagonalTarget,
    jitter: Jitter,
) -> Result<LossTerms> {
    Ok(wmse_objective(za, zb, cfg, Some(target), jitter, false)?.terms)
}

/// Gradient of [`wmse_loss`]. The `c` reported in the terms is the whitened
/// cross-correlation, computed for monitoring only.
pub fn wmse_grad(za: &EmbeddingBatch, zb: &EmbeddingBatch, cfg: &BtLossConfig, jitter: Jitter) -> Result<LossGrad> {
    wmse_objective(za, zb, cfg, None, jitter, true)
}

/// Gradient of [`wmse_variant_loss`].
pub fn wmse_variant_grad(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    cfg: &BtLossConfig,
    target: &OffDiagonalTarget,
    jitter: Jitter,
) -> Result<LossGrad> {
    wmse_objective(za, zb, cfg, Some(target), jitter, true)
}

fn wmse_objective(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    cfg: &BtLossConfig,
    target: Option<&OffDiagonalTarget>,
    jitter: Jitter,
    with_grad: bool,
) -> Result<LossGrad> {
    cfg.validate()?;
    if let Some(t) = target {
        t.check_dim(za.d())?;
    }
    let fwd = wmse_forward(za, zb, jitter)?;
    let n = za.n() as f64;
    let sa = linalg::standardize(fwd.ua.u.view(), cfg.eps);
    let sb = linalg::standardize(fwd.ub.u.view(), cfg.eps);
    let c = linalg::correlation_of(&sa, &sb);
    let off_diagonal = target.map_or(0.0, |t| cfg.lambda * off_diagonal_term(&c, t));
    let terms = LossTerms {
        total: fwd.mse + off_diagonal,
        diagonal: fwd.mse,
        off_diagonal,
        c: CrossCorrelation {
            c,
            source_batch_size: za.n(),
            degenerate: sa.any_degenerate() || sb.any_degenerate(),
        },
    };
    if !with_grad {
        let d = za.d();
        return Ok(LossGrad { terms, grad_a: Array2::zeros((0, d)), grad_b: Array2::zeros((0, d)) });
    }
    let diff = &fwd.ua.u - &fwd.ub.u;
    let mut gu_a = &diff * (2.0 / n);
    let mut gu_b = -&gu_a;
    if let Some(t) = target {
        let g = correlation_grad(&terms.c.c, 0.0, cfg.lambda, t);
        gu_a += &sa.backward((sb.z.dot(&g.t()) / n).view());
        gu_b += &sb.backward((sa.z.dot(&g) / n).view());
    }
    let gy_a = fwd.ua.backward(gu_a.view());
    let gy_b = fwd.ub.backward(gu_b.view());
    Ok(LossGrad {
        grad_a: fwd.wa.backward(gy_a.view()),
        grad_b: fwd.wb.backward(gy_b.view()),
        terms,
    })
}

/// Which objective family a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Bt,
    Wmse,
}

/// A fully specified training objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub family: LossFamily,
    pub cfg: BtLossConfig,
    /// `None` means the plain objective (zero target for BT, no off-diagonal
    /// penalty for W-MSE).
    pub target: Option<OffDiagonalTarget>,
    pub jitter: Jitter,
}

impl Objective {
    pub fn evaluate(&self, za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<LossTerms> {
        match self.family {
            LossFamily::Bt => {
                let zero = OffDiagonalTarget::zero();
                bt_loss(za, zb, &self.cfg, self.target.as_ref().unwrap_or(&zero))
            }
            LossFamily::Wmse => {
                Ok(wmse_objective(za, zb, &self.cfg, self.target.as_ref(), self.jitter, false)?.terms)
            }
        }
    }

    pub fn gradient(&self, za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<LossGrad> {
        match self.family {
            LossFamily::Bt => {
                let zero = OffDiagonalTarget::zero();
                bt_loss_grad(za, zb, &self.cfg, self.target.as_ref().unwrap_or(&zero))
            }
            LossFamily::Wmse => wmse_objective(za, zb, &self.cfg, self.target.as_ref(), self.jitter, true),
        }
    }

    /// The correlation matrix this objective penalizes, used to build the
    /// average target.
    pub fn correlation(&self, za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<CrossCorrelation> {
        Ok(self.evaluate(za, zb)?.c)
    }
}

/// Convenience view used by the finite-difference tests.
#[doc(hidden)]
pub fn loss_value(obj: &Objective, za: ArrayView2<'_, f64>, zb: ArrayView2<'_, f64>) -> Result<f64> {
    let a = EmbeddingBatch::new(za.to_owned())?;
    let b = EmbeddingBatch::new(zb.to_owned())?;
    Ok(obj.evaluate(&a, &b)?.total)
}
