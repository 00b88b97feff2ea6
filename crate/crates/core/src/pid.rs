//! Williams–Beer partial information decomposition for two sources.
//!
//! For sources `S1`, `S2` and target `T`, the joint mutual information splits
//! into four non-negative parts:
//!
//! ```text
//! I(T; S1,S2) = Redundancy + Unique(S1) + Unique(S2) + Synergy
//! ```
//!
//! Redundancy is `I_min`, the expected source-wise minimum of the specific
//! information `I(T=t; S)`. The rest follows from the two marginal mutual
//! informations. All quantities are in bits, with `0 log 0 = 0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::linalg::EmbeddingBatch;
use crate::{Error, Result};

/// Tolerance on the total mass when building a distribution from a table.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Largest dense table `|T| * |S1| * |S2|` accepted by [`estimate_joint`].
const MAX_CELLS: usize = 1 << 26;

/// Which source a specific-information query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    S1,
    S2,
}

/// A finite trivariate distribution `p(t, s1, s2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    probs: Array3<f64>,
}

impl JointDistribution {
    /// Build from a `|T| x |S1| x |S2|` table of non-negative weights whose
    /// total is within [`NORMALIZATION_TOL`] of one. The table is rescaled to
    /// sum to one exactly (up to rounding).
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
        }
        let total: f64 = probs.sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probs: probs / total })
    }

    /// Build from unnormalized non-negative weights.
    pub fn from_weights(weights: Array3<f64>) -> Result<Self> {
        let total: f64 = weights.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution("weights must have positive finite mass".into()));
        }
        Self::new(weights / total)
    }

    /// Uniform distribution over a list of `(t, s1, s2)` outcomes
    /// (repetitions add weight).
    pub fn from_outcomes(outcomes: &[(usize, usize, usize)]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let nt = outcomes.iter().map(|o| o.0).max().unwrap() + 1;
        let n1 = outcomes.iter().map(|o| o.1).max().unwrap() + 1;
        let n2 = outcomes.iter().map(|o| o.2).max().unwrap() + 1;
        let mut w = Array3::zeros((nt, n1, n2));
        for &(t, a, b) in outcomes {
            w[[t, a, b]] += 1.0;
        }
        Self::from_weights(w)
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    /// Alphabet sizes `(|T|, |S1|, |S2|)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.probs.dim()
    }

    /// `p(t)`
    pub fn target_marginal(&self) -> Vec<f64> {
        let (nt, n1, n2) = self.shape();
        (0..nt)
            .map(|t| {
                let mut s = 0.0;
                for a in 0..n1 {
                    for b in 0..n2 {
                        s += self.probs[[t, a, b]];
                    }
                }
                s
            })
            .collect()
    }

    /// `p(t, s)` for one source, as a `|T| x |S|` table.
    pub fn target_source(&self, source: Source) -> Array2<f64> {
        let (nt, n1, n2) = self.shape();
        match source {
            Source::S1 => Array2::from_shape_fn((nt, n1), |(t, a)| {
                (0..n2).map(|b| self.probs[[t, a, b]]).sum()
            }),
            Source::S2 => Array2::from_shape_fn((nt, n2), |(t, b)| {
                (0..n1).map(|a| self.probs[[t, a, b]]).sum()
            }),
        }
    }

    /// `p(t, (s1, s2))` with the source pair flattened row-major.
    pub fn target_pair(&self) -> Array2<f64> {
        let (nt, n1, n2) = self.shape();
        self.probs
            .to_shape((nt, n1 * n2))
            .expect("contiguous table")
            .to_owned()
    }

    /// Exchange the roles of `S1` and `S2`.
    pub fn swap_sources(&self) -> Self {
        let mut p = self.probs.clone();
        p.swap_axes(1, 2);
        Self {
            probs: p.as_standard_layout().to_owned(),
        }
    }

    /// Render in the plain-text table format: header `T S1 S2 p`, one row per
    /// nonzero cell.
    pub fn to_table(&self) -> String {
        let mut out = String::from("T S1 S2 p\n");
        for ((t, a, b), &p) in self.probs.indexed_iter() {
            if p > 0.0 {
                out.push_str(&format!("{t} {a} {b} {p}\n"));
            }
        }
        out
    }

    /// Parse the plain-text table format. Blank lines and lines starting
    /// with `#` are ignored; alphabet sizes are the largest symbol plus one.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut header_seen = false;
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !header_seen {
                if fields != ["T", "S1", "S2", "p"] {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected header `T S1 S2 p`, found `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let sym = |k: usize| -> Result<usize> {
                fields[k].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad symbol `{}`: {e}", fields[k]),
                })
            };
            let p = fields[3].parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad probability `{}`: {e}", fields[3]),
            })?;
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("probability {p} out of range"),
                });
            }
            cells.push((sym(0)?, sym(1)?, sym(2)?, p));
        }
        if !header_seen || cells.is_empty() {
            return Err(Error::EmptyInput);
        }
        let nt = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let n1 = cells.iter().map(|c| c.1).max().unwrap() + 1;
        let n2 = cells.iter().map(|c| c.2).max().unwrap() + 1;
        if nt.saturating_mul(n1).saturating_mul(n2) > MAX_CELLS {
            return Err(Error::AlphabetTooLarge(format!("{nt}x{n1}x{n2} table")));
        }
        let mut probs = Array3::zeros((nt, n1, n2));
        for (t, a, b, p) in cells {
            probs[[t, a, b]] += p;
        }
        Self::new(probs)
    }
}

impl FromStr for JointDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_table(s)
    }
}

/// The four PID components plus the joint mutual information, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidDecomposition {
    pub redundancy: f64,
    pub unique_s1: f64,
    pub unique_s2: f64,
    pub synergy: f64,
    pub joint_mi: f64,
}

impl PidDecomposition {
    pub fn components(&self) -> [f64; 4] {
        [self.redundancy, self.unique_s1, self.unique_s2, self.synergy]
    }

    /// `joint_mi - (redundancy + unique_s1 + unique_s2 + synergy)`
    pub fn sum_gap(&self) -> f64 {
        self.joint_mi - self.components().iter().sum::<f64>()
    }
}

impl fmt::Display for PidDecomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Rounding residue must not print as "-0.000000".
        let v = |x: f64| if x.abs() < 5e-7 { 0.0 } else { x };
        writeln!(f, "redundancy {:.6}", v(self.redundancy))?;
        writeln!(f, "unique_s1  {:.6}", v(self.unique_s1))?;
        writeln!(f, "unique_s2  {:.6}", v(self.unique_s2))?;
        writeln!(f, "synergy    {:.6}", v(self.synergy))?;
        write!(f, "joint_mi   {:.6}", v(self.joint_mi))
    }
}

/// `I(X; Y)` in bits for a two-variable joint table `p(x, y)`.
pub fn mutual_information(joint: ArrayView2<'_, f64>) -> f64 {
    let px: Vec<f64> = joint.rows().into_iter().map(|r| r.sum()).collect();
    let py: Vec<f64> = joint.columns().into_iter().map(|c| c.sum()).collect();
    let mut mi = 0.0;
    for ((x, y), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (px[x] * py[y])).log2();
        }
    }
    mi.max(0.0)
}

/// Specific information from a `p(t, s)` table: `sum_s p(s|t) log2(p(t|s) / p(t))`.
fn specific_from_table(ts: &Array2<f64>, pt: &[f64], t: usize) -> f64 {
    let p_t = pt[t];
    let mut acc = 0.0;
    for (s, col) in ts.columns().into_iter().enumerate() {
        let p_ts = ts[[t, s]];
        if p_ts <= 0.0 {
            continue;
        }
        let p_s: f64 = col.sum();
        let p_s_given_t = p_ts / p_t;
        let p_t_given_s = p_ts / p_s;
        acc += p_s_given_t * (p_t_given_s / p_t).log2();
    }
    acc
}

/// Specific information `I(T = t; S)` that one source carries about a single
/// target value.
pub fn specific_information(joint: &JointDistribution, source: Source, t: usize) -> Result<f64> {
    let pt = joint.target_marginal();
    if t >= pt.len() || pt[t] <= 0.0 {
        return Err(Error::ZeroProbabilityTarget(t));
    }
    Ok(specific_from_table(&joint.target_source(source), &pt, t))
}

/// Williams–Beer redundancy `I_min = sum_t p(t) min_i I(T = t; S_i)`.
pub fn i_min(joint: &JointDistribution) -> f64 {
    let pt = joint.target_marginal();
    let t1 = joint.target_source(Source::S1);
    let t2 = joint.target_source(Source::S2);
    i_min_from(&pt, &t1, &t2)
}

fn i_min_from(pt: &[f64], t1: &Array2<f64>, t2: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for (t, &p) in pt.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let a = specific_from_table(t1, pt, t);
        let b = specific_from_table(t2, pt, t);
        acc += p * a.min(b);
    }
    acc.max(0.0)
}

/// Full two-source decomposition of `I(T; S1, S2)`.
pub fn decompose(joint: &JointDistribution) -> PidDecomposition {
    let pt = joint.target_marginal();
    let t1 = joint.target_source(Source::S1);
    let t2 = joint.target_source(Source::S2);
    let mi1 = mutual_information(t1.view());
    let mi2 = mutual_information(t2.view());
    let joint_mi = mutual_information(joint.target_pair().view());
    let redundancy = i_min_from(&pt, &t1, &t2);
    PidDecomposition {
        redundancy,
        unique_s1: mi1 - redundancy,
        unique_s2: mi2 - redundancy,
        synergy: joint_mi - mi1 - mi2 + redundancy,
        joint_mi,
    }
}

/// Equal-frequency binning of selected embedding dimensions into one
/// mixed-radix symbol per sample (first listed dimension most significant).
///
/// Bin edges for a dimension are the order statistics at ranks
/// `floor(k n / bins) - 1`, `k = 1..bins`; a value's bin is the number of
/// edges it strictly exceeds. Constant dimensions therefore land in bin 0.
pub fn quantize_embeddings(batch: &EmbeddingBatch, dims: &[usize], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions selected".into()));
    }
    if dims.len() as f64 * (bins as f64).log2() > 16.0 + 1e-12 {
        return Err(Error::AlphabetTooLarge(format!(
            "{} dims x {bins} bins exceeds 2^16 symbols",
            dims.len()
        )));
    }
    let data = batch.data();
    if let Some(&bad) = dims.iter().find(|&&j| j >= batch.d()) {
        return Err(Error::InvalidArgument(format!(
            "dimension {bad} out of range for width {}",
            batch.d()
        )));
    }
    let n = batch.n();
    let mut symbols = vec![0usize; n];
    for &j in dims {
        let col = data.column(j);
        let mut sorted: Vec<f64> = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..bins)
            .map(|k| sorted[(k * n / bins).saturating_sub(1)])
            .collect();
        for (sym, &v) in symbols.iter_mut().zip(col.iter()) {
            let bin = edges.iter().filter(|&&e| v > e).count();
            *sym = *sym * bins + bin;
        }
    }
    Ok(symbols)
}

fn compress(symbols: &[usize]) -> (Vec<usize>, usize) {
    let map: BTreeMap<usize, usize> = {
        let mut m = BTreeMap::new();
        for &s in symbols {
            m.entry(s).or_insert(0);
        }
        for (i, v) in m.values_mut().enumerate() {
            *v = i;
        }
        m
    };
    let n = map.len();
    (symbols.iter().map(|s| map[s]).collect(), n)
}

/// Empirical joint distribution of `(labels, sym1, sym2)`.
///
/// Each variable's alphabet is the set of values it actually takes, relabeled
/// to `0..k` in increasing order. The decomposition is invariant to this
/// relabeling and unobserved symbols carry no mass.
pub fn estimate_joint(sym1: &[usize], sym2: &[usize], labels: &[usize]) -> Result<JointDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if sym1.len() != labels.len() || sym2.len() != labels.len() {
        return Err(Error::shape(
            format!("{} samples", labels.len()),
            format!("{} / {}", sym1.len(), sym2.len()),
        ));
    }
    let (t, nt) = compress(labels);
    let (a, n1) = compress(sym1);
    let (b, n2) = compress(sym2);
    if nt.saturating_mul(n1).saturating_mul(n2) > MAX_CELLS {
        return Err(Error::AlphabetTooLarge(format!("{nt}x{n1}x{n2} table")));
    }
    let mut w = Array3::zeros((nt, n1, n2));
    for i in 0..t.len() {
        w[[t[i], a[i], b[i]]] += 1.0;
    }
    JointDistribution::from_weights(w)
}

/// Shannon entropy in bits of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>()
}
