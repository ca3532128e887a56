//! Monte-Carlo experiments: bias, coverage, power and sampling distribution
//! of the interval estimator, and the constraint simulation.

pub mod experiments;
pub mod generators;
pub mod output;

use serde::{Deserialize, Serialize};

use crate::constraints::LevelConvention;
use crate::error::{Error, Result};
use crate::support::WeightBox;

pub use experiments::{
    approximate_population, approximate_population_interval, run_bias_experiment,
    run_constraint_simulation, run_coverage_experiment, run_experiment, run_power_experiment,
    run_sampling_distribution, ConstraintSimResult, ExperimentResult, Population, SamplingResult,
};
pub use generators::{BinomialSumDesign, CustomGenerator, Generator};
pub use output::{fmt12, write_outputs, Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bias,
    Coverage,
    Power,
    Histogram,
    ConstraintCoverage,
    WidthVsSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub a: f64,
    pub b: f64,
}

impl BoxSpec {
    pub fn weight_box(&self) -> Result<WeightBox> {
        WeightBox::new(self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSpec {
    pub resamples: usize,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self { resamples: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSpec {
    pub n: usize,
    /// Rejection threshold for the p-value.
    pub level: f64,
    pub beta_tilde: Vec<f64>,
}

impl Default for PowerSpec {
    fn default() -> Self {
        Self {
            n: 100,
            level: 0.05,
            beta_tilde: (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    pub n: usize,
    pub replicates: usize,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            n: 100,
            replicates: 2000,
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSimSpec {
    /// Sample size of each replicate.
    pub n: usize,
    pub trials: u32,
    pub qbar: f64,
    /// `(alpha1, alpha2)` levels, read under `convention`.
    pub levels: (f64, f64),
    pub convention: LevelConvention,
    /// Number of interior splits of the total level.
    pub split_points: usize,
    pub width_replicates: usize,
    pub multistarts: usize,
}

impl Default for ConstraintSimSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            trials: 100,
            qbar: 0.5,
            levels: (0.98, 0.97),
            convention: LevelConvention::Coverage,
            split_points: 10,
            width_replicates: 100,
            multistarts: 4,
        }
    }
}

impl ConstraintSimSpec {
    /// `(alpha1, alpha2)` as significance levels.
    pub fn alphas(&self) -> Result<(f64, f64)> {
        Ok((
            self.convention.significance(self.levels.0)?,
            self.convention.significance(self.levels.1)?,
        ))
    }

    /// `alpha1 = total i / (points + 1)` for `i = 1..=points`.
    pub fn split_grid(&self, total: f64) -> Vec<(f64, f64)> {
        let m = self.split_points + 1;
        (1..m)
            .map(|i| {
                let a1 = total * i as f64 / m as f64;
                (a1, total - a1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: Generator,
    #[serde(default = "default_population")]
    pub n_population: usize,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(rename = "box")]
    pub weight_box: BoxSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    pub outputs: Vec<Metric>,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default)]
    pub power: PowerSpec,
    #[serde(default)]
    pub histogram: HistogramSpec,
    #[serde(default)]
    pub constraint: ConstraintSimSpec,
}

fn default_population() -> usize {
    1_000_000
}

fn default_alpha() -> f64 {
    0.05
}

impl ExperimentSpec {
    /// Checks the spec before any computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.weight_box.weight_box()?;
        crate::inference::check_alpha(self.alpha)?;
        if self.replicates < 100 {
            return bad(format!("at least 100 replicates are required, got {}", self.replicates));
        }
        if self.outputs.is_empty() {
            return bad("no outputs requested".into());
        }
        let single_column = !matches!(self.generator, Generator::BinomialSumConstraint);
        for m in &self.outputs {
            let ok = match m {
                Metric::ConstraintCoverage | Metric::WidthVsSplit => !single_column,
                _ => single_column,
            };
            if !ok {
                return bad(format!("output {m:?} is not available for generator {:?}", self.generator));
            }
        }
        if single_column {
            let mut ns = self.n_grid.clone();
            ns.extend([self.power.n, self.histogram.n]);
            if let Some(&n) = ns.iter().find(|&&n| n < 2 || n > self.n_population) {
                return bad(format!("sample size {n} outside [2, {}]", self.n_population));
            }
            if self.outputs.iter().any(|m| matches!(m, Metric::Bias | Metric::Coverage)) && self.n_grid.is_empty() {
                return bad("n_grid is empty".into());
            }
            if self.outputs.contains(&Metric::Coverage) && self.bootstrap.resamples < 100 {
                return bad(format!("at least 100 bootstrap resamples are required, got {}", self.bootstrap.resamples));
            }
            if self.histogram.bins == 0 || self.histogram.replicates < 100 {
                return bad("histogram needs bins > 0 and at least 100 replicates".into());
            }
            crate::inference::check_alpha(self.power.level)?;
        } else {
            let c = &self.constraint;
            let (a1, a2) = c.alphas()?;
            if a1 + a2 >= 1.0 {
                return bad("alpha1 + alpha2 must be below 1".into());
            }
            if c.n < 2 || c.split_points < 2 || c.width_replicates == 0 || c.multistarts == 0 {
                return bad("constraint simulation needs n >= 2, split_points >= 2, width_replicates > 0 and multistarts > 0".into());
            }
            BinomialSumDesign::new(c.trials)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> ExperimentSpec {
        toml::from_str(
            r#"
            generator = "std_normal_mean"
            n_population = 10000
            n_grid = [100, 500]
            replicates = 100
            seed = 1
            outputs = ["bias", "coverage", "power", "histogram"]
            [box]
            a = 0.1
            b = 1.0
            "#,
        )
        .unwrap()
    }

    #[test]
    fn parses_and_validates() {
        let s = fig1();
        s.validate().unwrap();
        assert_eq!(s.bootstrap.resamples, 500);
        assert_eq!(s.power.beta_tilde.len(), 41);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = fig1();
        s.replicates = 50;
        assert!(s.validate().is_err());
        let mut s = fig1();
        s.n_grid = vec![20_000];
        assert!(s.validate().is_err());
        let mut s = fig1();
        s.outputs = vec![Metric::WidthVsSplit];
        assert!(s.validate().is_err());
        assert!(toml::from_str::<ExperimentSpec>("generator = \"std_normal_mean\"\nbogus = 1").is_err());
    }

    #[test]
    fn split_grid_sums_to_total() {
        let c = ConstraintSimSpec::default();
        let g = c.split_grid(0.05);
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|(a, b)| (a + b - 0.05).abs() < 1e-15 && *a > 0.0 && *b > 0.0));
        let (a1, a2) = c.alphas().unwrap();
        assert!((a1 - 0.02).abs() < 1e-12 && (a2 - 0.03).abs() < 1e-12);
    }
}
