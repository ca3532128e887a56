//! Discrete support tables, the weight box and the weighted ratio estimator.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{Estimand, ObservationSet};
use crate::sum::CompensatedSum;

/// Bounds `0 < a <= b <= 1` on selection probabilities, i.e. weights in
/// `[1/b, 1/a]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBox {
    a: f64,
    b: f64,
    lo: f64,
    hi: f64,
}

impl WeightBox {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::InvalidBox { a, b });
        }
        Ok(Self {
            a,
            b,
            lo: 1.0 / b,
            hi: 1.0 / a,
        })
    }

    /// Box given directly by its weight bounds `1 <= lo <= hi`.
    pub fn from_weights(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo <= hi) {
            return Err(Error::InvalidBox {
                a: 1.0 / hi,
                b: 1.0 / lo,
            });
        }
        Ok(Self {
            a: 1.0 / hi,
            b: 1.0 / lo,
            lo,
            hi,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    /// Whether every weight lies in `[lo - tol, hi + tol]`.
    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        w.iter().all(|&x| x >= self.lo - tol && x <= self.hi + tol)
    }

    pub fn project(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// Observations collapsed onto their distinct support points.
///
/// `mass` holds cell counts for empirical tables and probabilities for
/// population tables; `phat` is always the normalized mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportTable {
    width: usize,
    points: Vec<f64>,
    mass: Vec<f64>,
    phat: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    n: usize,
}

impl SupportTable {
    fn build(
        width: usize,
        points: Vec<f64>,
        f: Vec<f64>,
        g: Vec<f64>,
        mass: Vec<f64>,
        n: usize,
    ) -> Result<Self> {
        let k = mass.len();
        if k == 0 {
            return Err(Error::EmptyInput);
        }
        for len in [f.len(), g.len()] {
            if len != k {
                return Err(Error::LengthMismatch { expected: k, got: len });
            }
        }
        if let Some(i) = (0..k).find(|&i| !(f[i].is_finite() && g[i].is_finite())) {
            return Err(Error::NonFiniteEvaluation { row: i });
        }
        if let Some(m) = mass.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "cell masses must be positive and finite, got {m}"
            )));
        }
        let total: f64 = mass.iter().copied().collect::<CompensatedSum>().value();
        let phat = mass.iter().map(|m| m / total).collect();
        Ok(Self {
            width,
            points,
            mass,
            phat,
            f,
            g,
            n,
        })
    }

    /// Table from per-cell moments and integer counts; `n` is the count total.
    pub fn from_counts(f: Vec<f64>, g: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if let Some(c) = counts.iter().find(|c| c.fract() != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell counts must be integers, got {c}"
            )));
        }
        let n = counts.iter().sum::<f64>() as usize;
        Self::build(0, Vec::new(), f, g, counts, n)
    }

    /// Table from per-cell moments and probabilities, with a nominal sample
    /// size used by inference routines.
    pub fn from_probabilities(
        f: Vec<f64>,
        g: Vec<f64>,
        p: Vec<f64>,
        n_nominal: usize,
    ) -> Result<Self> {
        Self::build(0, Vec::new(), f, g, p, n_nominal)
    }

    /// Attaches support points (`width` values per cell, row-major).
    pub fn with_points(mut self, width: usize, points: Vec<f64>) -> Result<Self> {
        if points.len() != width * self.k() {
            return Err(Error::LengthMismatch {
                expected: width * self.k(),
                got: points.len(),
            });
        }
        self.width = width;
        self.points = points;
        Ok(self)
    }

    /// Number of cells.
    pub fn k(&self) -> usize {
        self.mass.len()
    }

    /// Sample size the table was built from.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn phat(&self) -> &[f64] {
        &self.phat
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// Support point of cell `k`; empty for tables built from moments.
    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.width..(k + 1) * self.width]
    }

    pub fn has_points(&self) -> bool {
        self.width > 0
    }

    /// The unweighted ratio `sum f p / sum g p`.
    pub fn unweighted(&self) -> Result<f64> {
        evaluate(self, &vec![1.0; self.k()])
    }
}

/// Canonical bit pattern of a value; both zeros map to `+0.0`.
#[inline]
fn canonical_bits(x: f64) -> u64 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

/// Collapses rows onto distinct support points, also returning the cell index
/// of every row. Cells are numbered in order of first appearance.
pub fn collapse_with_index(obs: &ObservationSet, est: &Estimand) -> Result<(SupportTable, Vec<usize>)> {
    let n = obs.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let width = obs.width();
    let mut index: HashMap<Box<[u64]>, usize> = HashMap::with_capacity(n);
    let mut row_cell = Vec::with_capacity(n);
    let mut points = Vec::new();
    let mut f = Vec::new();
    let mut g = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for (i, row) in obs.rows().enumerate() {
        let key: Box<[u64]> = row.iter().map(|&x| canonical_bits(x)).collect();
        let cell = match index.get(&key) {
            Some(&c) => {
                counts[c] += 1.0;
                c
            }
            None => {
                let (fk, gk) = est.eval_row(row, i)?;
                let c = counts.len();
                index.insert(key, c);
                points.extend(row.iter().map(|&x| if x == 0.0 { 0.0 } else { x }));
                f.push(fk);
                g.push(gk);
                counts.push(1.0);
                c
            }
        };
        row_cell.push(cell);
    }
    let k = counts.len();
    if k as f64 > 0.9 * n as f64 && n > 10 {
        log::warn!("support has {k} cells for {n} rows; data look continuous");
    }
    let table = SupportTable::build(width, points, f, g, counts, n)?;
    Ok((table, row_cell))
}

/// Collapses rows onto distinct support points.
pub fn collapse_support(obs: &ObservationSet, est: &Estimand) -> Result<SupportTable> {
    collapse_with_index(obs, est).map(|(t, _)| t)
}

/// Weighted ratio estimator `sum w f p / sum w g p`.
pub fn evaluate(table: &SupportTable, w: &[f64]) -> Result<f64> {
    let (num, den) = weighted_sums(table, w)?;
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num / den)
}

/// Numerator and denominator of the weighted ratio, on the mass scale.
pub fn weighted_sums(table: &SupportTable, w: &[f64]) -> Result<(f64, f64)> {
    if w.len() != table.k() {
        return Err(Error::LengthMismatch {
            expected: table.k(),
            got: w.len(),
        });
    }
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for k in 0..table.k() {
        let wm = w[k] * table.mass[k];
        num.add(wm * table.f[k]);
        den.add(wm * table.g[k]);
    }
    Ok((num.value(), den.value()))
}

/// Identified interval estimate with optimizing vertex weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
    /// Cells whose ratio `f/g` equals the lower bound.
    pub degenerate_cells_lo: Vec<usize>,
    /// Cells whose ratio `f/g` equals the upper bound.
    pub degenerate_cells_hi: Vec<usize>,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.beta_hi - self.beta_lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.beta_lo <= x && x <= self.beta_hi
    }
}
