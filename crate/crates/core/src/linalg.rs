//! Dense linear algebra on batches of embeddings.
//!
//! Conventions used throughout:
//!
//! - [`standardize_columns`] uses the population variance (divide by `n`),
//!   like a batch-norm layer in front of a loss.
//! - [`covariance`] uses the sample variance (divide by `n - 1`), because it
//!   feeds the Cholesky whitening estimator.
//! - Columns whose variance falls below the guard are mapped to zeros instead
//!   of raising an error. Collapsed dimensions appear transiently while
//!   training and must not abort a run.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// Variance floor used by [`cross_correlation`] to decide that a column has
/// zero norm after centering.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Relative pivot floor for [`cholesky_lower`].
const PIVOT_FLOOR: f64 = 1e-12;

/// Symmetry tolerance for [`cholesky_lower`].
const SYMMETRY_TOL: f64 = 1e-9;

/// An `n x d` batch of embeddings: `n >= 2` samples, `d >= 1` dimensions, all
/// entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Array2<f64>);

impl EmbeddingBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 || d < 1 {
            return Err(Error::InvalidShape(format!(
                "embedding batch needs n >= 2 and d >= 1, got {n}x{d}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        Self::new(data)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Cross-correlation matrix between two embedding batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub c: Array2<f64>,
    /// Number of samples in the batch the matrix was computed from.
    pub source_batch_size: usize,
    /// Set when at least one column of either input had zero norm after
    /// centering. The corresponding rows / columns of `c` are zero.
    pub degenerate: bool,
}

impl CrossCorrelation {
    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Frobenius distance `||C - I||_F`.
    pub fn identity_gap(&self) -> f64 {
        self.c
            .indexed_iter()
            .map(|((i, j), &v)| {
                let e = if i == j { v - 1.0 } else { v };
                e * e
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Column standardization together with what is needed to backpropagate
/// through it.
#[derive(Debug, Clone)]
pub(crate) struct Standardized {
    pub z: Array2<f64>,
    /// `1 / std` per column, or `0` for degenerate columns.
    pub inv_std: Array1<f64>,
}

impl Standardized {
    pub fn any_degenerate(&self) -> bool {
        self.inv_std.iter().any(|&s| s == 0.0)
    }

    /// Gradient with respect to the raw input given `dL/dz`.
    pub fn backward(&self, grad_z: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.z.nrows() as f64;
        let mut out = Array2::zeros(self.z.raw_dim());
        for (j, &s) in self.inv_std.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let g = grad_z.column(j);
            let z = self.z.column(j);
            let mean_g = g.sum() / n;
            let mean_gz = g.dot(&z) / n;
            let mut col = out.column_mut(j);
            for m in 0..g.len() {
                col[m] = s * (g[m] - mean_g - z[m] * mean_gz);
            }
        }
        out
    }
}

pub(crate) fn standardize(x: ArrayView2<'_, f64>, eps: f64) -> Standardized {
    let (n, d) = x.dim();
    let mut z = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(d);
    for j in 0..d {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var < eps || var == 0.0 {
            continue;
        }
        let s = 1.0 / var.sqrt();
        inv_std[j] = s;
        for (o, v) in z.column_mut(j).iter_mut().zip(col.iter()) {
            *o = (v - mean) * s;
        }
    }
    Standardized { z, inv_std }
}

/// Center every column and scale it to unit population standard deviation.
///
/// Columns with variance below `eps` become all zeros.
pub fn standardize_columns(batch: &EmbeddingBatch, eps: f64) -> Result<EmbeddingBatch> {
    let st = standardize(batch.view(), eps);
    EmbeddingBatch::new(st.z)
}

pub(crate) fn correlation_of(za: &Standardized, zb: &Standardized) -> Array2<f64> {
    let n = za.z.nrows() as f64;
    za.z.t().dot(&zb.z) / n
}

/// Pearson cross-correlation `C_ij` between column `i` of `za` and column
/// `j` of `zb`.
///
/// Both inputs are mean-centered and divided by their column norms, so raw
/// embeddings are accepted. Zero-norm columns produce zero rows (for `za`) or
/// zero columns (for `zb`) and set [`CrossCorrelation::degenerate`].
pub fn cross_correlation(za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<CrossCorrelation> {
    cross_correlation_eps(za, zb, ZERO_VARIANCE)
}

/// [`cross_correlation`] with an explicit variance guard.
pub fn cross_correlation_eps(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    eps: f64,
) -> Result<CrossCorrelation> {
    if za.data().dim() != zb.data().dim() {
        return Err(Error::shape(
            format!("{:?}", za.data().dim()),
            format!("{:?}", zb.data().dim()),
        ));
    }
    let sa = standardize(za.view(), eps);
    let sb = standardize(zb.view(), eps);
    Ok(CrossCorrelation {
        c: correlation_of(&sa, &sb),
        source_batch_size: za.n(),
        degenerate: sa.any_degenerate() || sb.any_degenerate(),
    })
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("n >= 1");
    &x - &mean
}

pub(crate) fn covariance_of(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let xc = centered(x);
    let n = x.nrows() as f64;
    xc.t().dot(&xc) / (n - 1.0)
}

/// Sample covariance (divide by `n - 1`) of the mean-centered columns.
pub fn covariance(batch: &EmbeddingBatch) -> Array2<f64> {
    covariance_of(batch.view())
}

/// Lower Cholesky factor `L` with `L L^T = m`.
///
/// Only the lower triangle of `m` is read once symmetry has been checked.
pub fn cholesky_lower(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (r, c) = m.dim();
    if r != c || r == 0 {
        return Err(Error::InvalidShape(format!("cholesky needs a square matrix, got {r}x{c}")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..r {
        for j in 0..i {
            let gap = (m[[i, j]] - m[[j, i]]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric { row: i, col: j, gap });
            }
        }
    }
    let max_diag = (0..r).fold(0.0_f64, |a, i| a.max(m[[i, i]].abs()));
    let floor = PIVOT_FLOOR * max_diag;
    let mut l = Array2::<f64>::zeros((r, r));
    for j in 0..r {
        let mut pivot = m[[j, j]];
        for k in 0..j {
            pivot -= l[[j, k]] * l[[j, k]];
        }
        if !(pivot > floor) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..r {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve `L X = B` for lower-triangular `L`.
pub(crate) fn solve_lower(l: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = l.nrows();
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in 0..d {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

/// Regularization added to the covariance before whitening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    /// Add `value * I`.
    Fixed(f64),
    /// Add `factor * trace(cov) / d * I`.
    Relative(f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative(1e-5)
    }
}

impl Jitter {
    pub fn none() -> Self {
        Jitter::Fixed(0.0)
    }

    pub(crate) fn amount(&self, cov: &Array2<f64>) -> f64 {
        match *self {
            Jitter::Fixed(v) => v,
            Jitter::Relative(f) => f * cov.diag().sum() / cov.nrows() as f64,
        }
    }
}

/// Forward pass of Cholesky whitening, keeping intermediates for backward.
#[derive(Debug, Clone)]
pub(crate) struct Whitened {
    pub xc: Array2<f64>,
    pub l: Array2<f64>,
    /// `L^{-1}`
    pub l_inv: Array2<f64>,
    pub y: Array2<f64>,
    pub jitter: Jitter,
}

pub(crate) fn whiten(x: ArrayView2<'_, f64>, jitter: Jitter) -> Result<Whitened> {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let xc = centered(x);
    let mut cov = xc.t().dot(&xc) / (n - 1.0);
    let j = jitter.amount(&cov);
    if !(j >= 0.0) || !j.is_finite() {
        return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {j}")));
    }
    for i in 0..d {
        cov[[i, i]] += j;
    }
    let l = cholesky_lower(cov.view())?;
    let l_inv = solve_lower(l.view(), Array2::eye(d).view());
    // Y = Xc L^{-T}
    let y = xc.dot(&l_inv.t());
    Ok(Whitened { xc, l, l_inv, y, jitter })
}

impl Whitened {
    /// Gradient with respect to the raw input given `dL/dY`.
    pub fn backward(&self, grad_y: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.xc.nrows() as f64;
        let d = self.l.nrows();
        let w = self.l_inv.t(); // L^{-T}
        // Direct path: dY = dXc W.
        let mut grad_xc = grad_y.dot(&w.t());
        // Through L: dY = -Y dL^T W, so dL/dL = -tril(W G^T Y).
        let mut grad_l = -(w.dot(&grad_y.t()).dot(&self.y));
        // Cholesky backward: phi = tril(L^T Lbar) with halved diagonal,
        // Sigma_bar = sym(L^{-T} phi L^{-1}).
        for i in 0..d {
            for j in i + 1..d {
                grad_l[[i, j]] = 0.0;
            }
        }
        let mut phi = self.l.t().dot(&grad_l);
        for i in 0..d {
            for j in i + 1..d {
                phi[[i, j]] = 0.0;
            }
            phi[[i, i]] *= 0.5;
        }
        let s = w.dot(&phi).dot(&self.l_inv);
        let mut grad_cov = (&s + &s.t()) * 0.5;
        if let Jitter::Relative(f) = self.jitter {
            let tr = grad_cov.diag().sum();
            for i in 0..d {
                grad_cov[[i, i]] += f * tr / d as f64;
            }
        }
        // Sigma = Xc^T Xc / (n - 1), grad symmetric.
        grad_xc = grad_xc + self.xc.dot(&grad_cov) * (2.0 / (n - 1.0));
        // Xc = X - mean(X)
        let mean = grad_xc.mean_axis(Axis(0)).expect("n >= 1");
        grad_xc - &mean
    }
}

/// Whiten a batch: center it and multiply by the inverse transpose of the
/// Cholesky factor of `cov + jitter * I`.
pub fn whiten_cholesky(batch: &EmbeddingBatch, jitter: Jitter) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(whiten(batch.view(), jitter)?.y)
}

/// Row normalization, keeping norms for backward.
#[derive(Debug, Clone)]
pub(crate) struct RowNormalized {
    pub u: Array2<f64>,
    /// `1 / ||row||`, or `0` for rows below the guard.
    pub inv_norm: Array1<f64>,
}

pub(crate) fn normalize_rows(x: ArrayView2<'_, f64>, eps: f64) -> RowNormalized {
    let mut u = Array2::zeros(x.raw_dim());
    let mut inv_norm = Array1::zeros(x.nrows());
    for (m, row) in x.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < eps || norm == 0.0 {
            continue;
        }
        inv_norm[m] = 1.0 / norm;
        u.row_mut(m).assign(&(&row / norm));
    }
    RowNormalized { u, inv_norm }
}

impl RowNormalized {
    pub fn backward(&self, grad_u: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(self.u.raw_dim());
        for (m, &s) in self.inv_norm.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let g = grad_u.row(m);
            let u = self.u.row(m);
            let proj = g.dot(&u);
            out.row_mut(m).assign(&((&g - &(&u * proj)) * s));
        }
        out
    }
}

/// Scale every row to unit Euclidean norm. Rows with norm below `eps` are
/// returned as zeros.
pub fn l2_normalize_rows(batch: &EmbeddingBatch, eps: f64) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(normalize_rows(batch.view(), eps).u)
}
