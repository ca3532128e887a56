//! Estimands defined by a ratio moment condition `E[f(T)] - beta E[g(T)] = 0`
//! and the raw observation matrix they are evaluated on.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

type RowFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimandKind {
    Mean,
    Ols,
    Iv,
    Custom,
}

/// The pair `(f, g)` defining `beta = E[f(T)] / E[g(T)]`.
#[derive(Clone)]
pub struct Estimand {
    kind: EstimandKind,
    f: RowFn,
    g: RowFn,
}

impl fmt::Debug for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Estimand").field("kind", &self.kind).finish()
    }
}

impl Estimand {
    /// Population mean of column `y`: `f = y`, `g = 1`.
    pub fn mean(y: usize) -> Self {
        Self {
            kind: EstimandKind::Mean,
            f: Arc::new(move |t| t[y]),
            g: Arc::new(|_| 1.0),
        }
    }

    /// No-intercept least squares slope: `f = x y`, `g = x^2`.
    pub fn ols(x: usize, y: usize) -> Self {
        Self {
            kind: EstimandKind::Ols,
            f: Arc::new(move |t| t[x] * t[y]),
            g: Arc::new(move |t| t[x] * t[x]),
        }
    }

    /// Just-identified instrumental variables ratio: `f = z y`, `g = z x`.
    pub fn iv(z: usize, x: usize, y: usize) -> Self {
        Self {
            kind: EstimandKind::Iv,
            f: Arc::new(move |t| t[z] * t[y]),
            g: Arc::new(move |t| t[z] * t[x]),
        }
    }

    pub fn custom<F, G>(f: F, g: G) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: EstimandKind::Custom,
            f: Arc::new(f),
            g: Arc::new(g),
        }
    }

    pub fn kind(&self) -> EstimandKind {
        self.kind
    }

    #[inline]
    pub fn f(&self, row: &[f64]) -> f64 {
        (self.f)(row)
    }

    #[inline]
    pub fn g(&self, row: &[f64]) -> f64 {
        (self.g)(row)
    }

    /// Evaluates `(f, g)` on a row, rejecting non-finite results.
    pub fn eval_row(&self, row: &[f64], index: usize) -> Result<(f64, f64)> {
        let (f, g) = (self.f(row), self.g(row));
        if f.is_finite() && g.is_finite() {
            Ok((f, g))
        } else {
            Err(Error::NonFiniteEvaluation { row: index })
        }
    }
}

/// `n` observations of a `t`-dimensional vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    names: Vec<String>,
    data: Vec<f64>,
    n: usize,
}

impl ObservationSet {
    /// Builds an observation set from row-major data. Every cell must be
    /// finite; missing data has to be resolved upstream.
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let width = names.len();
        if width == 0 || data.is_empty() {
            return Err(Error::EmptyInput);
        }
        if data.len() % width != 0 {
            return Err(Error::LengthMismatch {
                expected: (data.len() / width + 1) * width,
                got: data.len(),
            });
        }
        let n = data.len() / width;
        if n < 2 {
            return Err(Error::TooFewRows { required: 2, got: n });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue {
                row: pos / width,
                column: pos % width,
            });
        }
        Ok(Self { names, data, n })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let width = names.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::LengthMismatch {
                expected: width,
                got: bad.len(),
            });
        }
        Self::new(names, rows.iter().flatten().copied().collect())
    }

    /// Single named column.
    pub fn from_column(name: &str, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![name.to_string()], values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.width())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rounds every value to the nearest multiple of `step`.
    pub fn binned(&self, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "binning step must be positive, got {step}"
            )));
        }
        let data = self
            .data
            .iter()
            .map(|&v| (v / step).round() * step)
            .collect();
        Self::new(self.names.clone(), data)
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.names.clone(), data)
    }
}
