//! Percentile bootstrap confidence intervals for the identified interval.
//!
//! Rows are resampled with replacement. Because a resample only reweights
//! existing support points, each resample is represented by per-cell counts
//! over the collapsed table of the original data; cells with a zero count
//! drop out of the optimization exactly as if the rows had been re-collapsed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{Estimand, ObservationSet};
use crate::exec::Exec;
use crate::inference::check_alpha;
use crate::lfp::{bounds_with_order, RatioOrder};
use crate::rng::{domain, substream, StreamRng};
use crate::support::{collapse_with_index, SupportTable, WeightBox};

/// Attempts per resample before it counts as permanently failed.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub c_lo: f64,
    pub c_hi: f64,
    pub r: usize,
    pub alpha: f64,
    pub seed: u64,
    pub lo_draws: Vec<f64>,
    pub hi_draws: Vec<f64>,
    /// Resamples redrawn because their denominator vanished.
    pub redrawn: usize,
}

impl BootstrapCI {
    pub fn width(&self) -> f64 {
        self.c_hi - self.c_lo
    }

    pub fn contains(&self, lo: f64, hi: f64) -> bool {
        self.c_lo <= lo && hi <= self.c_hi
    }
}

/// Type-7 sample quantile: linear interpolation at position `(n - 1) q`.
pub fn quantile(draws: &[f64], q: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let mut xs = draws.to_vec();
    xs.sort_by(f64::total_cmp);
    let h = (xs.len() - 1) as f64 * q;
    let i = h.floor() as usize;
    if i + 1 >= xs.len() {
        return Ok(xs[xs.len() - 1]);
    }
    Ok(xs[i] + (h - i as f64) * (xs[i + 1] - xs[i]))
}

/// Collapsed data plus the row-to-cell map needed to draw resamples.
#[derive(Debug, Clone)]
pub struct Resampler {
    table: SupportTable,
    row_cell: Vec<usize>,
    order: RatioOrder,
}

impl Resampler {
    pub fn new(obs: &ObservationSet, est: &Estimand) -> Result<Self> {
        let (table, row_cell) = collapse_with_index(obs, est)?;
        Ok(Self::from_parts(table, row_cell))
    }

    /// `row_cell[i]` is the cell of row `i` in `table`.
    pub fn from_parts(table: SupportTable, row_cell: Vec<usize>) -> Self {
        let order = RatioOrder::new(table.f(), table.g());
        Self {
            table,
            row_cell,
            order,
        }
    }

    pub fn table(&self) -> &SupportTable {
        &self.table
    }

    pub fn n(&self) -> usize {
        self.row_cell.len()
    }

    /// Cell counts of one resample of `n` rows drawn with replacement.
    pub fn draw_counts(&self, rng: &mut StreamRng) -> Vec<f64> {
        let n = self.row_cell.len();
        let mut counts = vec![0.0; self.table.k()];
        for _ in 0..n {
            counts[self.row_cell[rng.random_range(0..n)]] += 1.0;
        }
        counts
    }

    /// The resample as a collapsed table of its own (zero-count cells dropped).
    pub fn counts_to_table(&self, counts: &[f64]) -> Result<SupportTable> {
        let keep: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0.0).collect();
        SupportTable::from_counts(
            keep.iter().map(|&k| self.table.f()[k]).collect(),
            keep.iter().map(|&k| self.table.g()[k]).collect(),
            keep.iter().map(|&k| counts[k]).collect(),
        )
    }

    /// Interval endpoints for a resample given by its cell counts.
    pub fn bounds(&self, counts: &[f64], bx: &WeightBox) -> Result<(f64, f64)> {
        bounds_with_order(self.table.f(), self.table.g(), counts, &self.order, bx)
    }

    /// Endpoints of resample `r`, redrawing on a vanishing denominator.
    /// Returns the endpoints and the number of redraws.
    fn resample(&self, bx: &WeightBox, seed: u64, r: usize) -> (Option<(f64, f64)>, usize) {
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = substream(seed, domain::BOOTSTRAP, (attempt << 32) | r as u64);
            let counts = self.draw_counts(&mut rng);
            if let Ok(b) = self.bounds(&counts, bx) {
                return (Some(b), attempt as usize);
            }
        }
        (None, MAX_ATTEMPTS as usize)
    }

    /// Percentile bootstrap interval from `r` resamples.
    pub fn bootstrap(&self, bx: &WeightBox, r: usize, alpha: f64, seed: u64, exec: Exec) -> Result<BootstrapCI> {
        check_alpha(alpha)?;
        if r < 100 {
            return Err(Error::InvalidArgument(format!(
                "at least 100 bootstrap resamples are required, got {r}"
            )));
        }
        let results = exec.map(r, |i| self.resample(bx, seed, i));
        let redrawn: usize = results.iter().map(|(_, a)| a).sum();
        if redrawn * 100 > r || results.iter().any(|(b, _)| b.is_none()) {
            return Err(Error::TooManyFailedResamples {
                failed: redrawn,
                total: r,
            });
        }
        let (lo_draws, hi_draws): (Vec<f64>, Vec<f64>) =
            results.into_iter().map(|(b, _)| b.expect("checked above")).unzip();
        Ok(BootstrapCI {
            c_lo: quantile(&lo_draws, alpha / 2.0)?,
            c_hi: quantile(&hi_draws, 1.0 - alpha / 2.0)?,
            r,
            alpha,
            seed,
            lo_draws,
            hi_draws,
            redrawn,
        })
    }
}

/// Percentile bootstrap confidence interval for the identified interval.
pub fn bootstrap_ci(
    obs: &ObservationSet,
    est: &Estimand,
    bx: &WeightBox,
    r: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapCI> {
    Resampler::new(obs, est)?.bootstrap(bx, r, alpha, seed, Exec::default())
}
