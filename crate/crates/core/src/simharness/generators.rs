//! Data-generating processes for the simulation experiments.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::ObservationSet;
use crate::rng::{binomial_pmf, standard_normal, BinomialInversion, StreamRng};
use crate::support::SupportTable;

/// Draws one outcome value; used for mean-estimand experiments.
pub type CustomGenerator = Arc<dyn Fn(&mut StreamRng) -> f64 + Send + Sync>;

#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Outcomes `Y ~ N(0, 1)`; the estimand is the mean of `Y`.
    StdNormalMean,
    /// `Y = Q + E` with `Q, E` standardized `B(trials, 1/2)` and a known
    /// population mean of `Q`.
    BinomialSumConstraint,
    /// Library-only generator of outcome values.
    #[serde(skip)]
    Custom(CustomGenerator),
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::StdNormalMean => write!(f, "StdNormalMean"),
            Generator::BinomialSumConstraint => write!(f, "BinomialSumConstraint"),
            Generator::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Generator {
    /// One outcome draw for the single-column generators.
    pub fn draw(&self, rng: &mut StreamRng) -> Result<f64> {
        match self {
            Generator::StdNormalMean => Ok(standard_normal(rng)),
            Generator::Custom(g) => Ok(g(rng)),
            Generator::BinomialSumConstraint => Err(Error::InvalidArgument(
                "the binomial-sum design has no single-column draw".into(),
            )),
        }
    }
}

/// The binomial-sum design with a covariate-mean constraint.
#[derive(Debug, Clone)]
pub struct BinomialSumDesign {
    pub trials: u32,
    sampler: BinomialInversion,
    pmf: Vec<f64>,
}

impl BinomialSumDesign {
    pub fn new(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(Error::InvalidArgument("binomial design needs at least one trial".into()));
        }
        Ok(Self {
            trials,
            sampler: BinomialInversion::new(trials, 0.5),
            pmf: binomial_pmf(trials, 0.5),
        })
    }

    /// Standardized value of a count: `(x - trials/2) / sqrt(trials/4)`.
    pub fn scale(&self, x: u32) -> f64 {
        let t = self.trials as f64;
        (x as f64 - 0.5 * t) / (0.25 * t).sqrt()
    }

    /// Inverse of [`scale`](Self::scale), rounded to the nearest count.
    pub fn count_of(&self, v: f64) -> usize {
        let t = self.trials as f64;
        (v * (0.25 * t).sqrt() + 0.5 * t).round() as usize
    }

    pub fn levels(&self) -> usize {
        self.trials as usize + 1
    }

    /// Exact population table over every `(Q, E)` pair, with points `(q, y)`
    /// and the mean of `y` as estimand. Cell `i * levels + j` holds `Q = i`,
    /// `E = j`.
    pub fn population_table(&self) -> Result<SupportTable> {
        let m = self.levels();
        let mut f = Vec::with_capacity(m * m);
        let mut p = Vec::with_capacity(m * m);
        let mut points = Vec::with_capacity(2 * m * m);
        for i in 0..m {
            for j in 0..m {
                let q = self.scale(i as u32);
                let y = q + self.scale(j as u32);
                f.push(y);
                p.push(self.pmf[i] * self.pmf[j]);
                points.extend([q, y]);
            }
        }
        SupportTable::from_probabilities(f, vec![1.0; m * m], p, usize::MAX)?.with_points(2, points)
    }

    /// Population cell of a sample point `(q, y)`.
    pub fn cell_of(&self, q: f64, y: f64) -> usize {
        self.count_of(q) * self.levels() + self.count_of(y - q)
    }

    /// `n` iid draws as columns `q`, `y`.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Result<ObservationSet> {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let q = self.scale(self.sampler.sample(rng));
            let e = self.scale(self.sampler.sample(rng));
            data.extend([q, q + e]);
        }
        ObservationSet::new(vec!["q".into(), "y".into()], data)
    }
}
