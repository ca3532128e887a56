//! Experiment drivers. Replicate `r` of every experiment draws from its own
//! random substream, so results do not depend on the execution strategy.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::generators::BinomialSumDesign;
use super::output::Table;
use super::{ExperimentSpec, Generator, Metric};
use crate::bootstrap::Resampler;
use crate::constraints::{
    build_relaxed_constraint, solve_constrained_bounds, theorem3_ci, tune_alpha_split, AuxConstraint,
    SolverOptions,
};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::exec::Exec;
use crate::inference::{confidence_interval, endpoint_standard_errors, normal_cdf, p_value_from_parts, sigma2_hat};
use crate::lfp::{self, Direction};
use crate::rng::{domain, substream, StreamRng};
use crate::support::{collapse_support, IntervalEstimate, SupportTable};

const POWER_TAG: u64 = 1 << 20;
const HISTOGRAM_TAG: u64 = 2 << 20;

/// The large finite draw standing in for the population.
#[derive(Debug, Clone)]
pub struct Population {
    pub values: Vec<f64>,
    pub table: SupportTable,
    pub interval: IntervalEstimate,
    /// `sigma^2(w_hi)` evaluated on the draw at its own upper maximizer.
    pub sigma2_hi: f64,
}

/// Mean-estimand table of `values` with cells in sorted order, and the cell
/// of every value.
fn mean_table(values: &[f64]) -> Result<(SupportTable, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut f: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut row_cell = vec![0; values.len()];
    for &i in &idx {
        let v = values[i] + 0.0;
        if !v.is_finite() {
            return Err(Error::NonFiniteEvaluation { row: i });
        }
        if f.last() != Some(&v) {
            f.push(v);
            counts.push(0.0);
        }
        *counts.last_mut().expect("pushed above") += 1.0;
        row_cell[i] = f.len() - 1;
    }
    let k = f.len();
    Ok((SupportTable::from_counts(f, vec![1.0; k], counts)?, row_cell))
}

fn subsample(values: &[f64], n: usize, rng: &mut StreamRng) -> Vec<f64> {
    sample(rng, values.len(), n).into_iter().map(|i| values[i]).collect()
}

fn replicate_rng(spec: &ExperimentSpec, tag: u64, r: usize) -> StreamRng {
    substream(spec.seed, domain::SUBSAMPLE, (tag << 32) | r as u64)
}

pub fn approximate_population(spec: &ExperimentSpec) -> Result<Population> {
    let bx = spec.weight_box.weight_box()?;
    let mut rng = substream(spec.seed, domain::POPULATION, 0);
    let values = (0..spec.n_population)
        .map(|_| spec.generator.draw(&mut rng))
        .collect::<Result<Vec<f64>>>()?;
    let (table, _) = mean_table(&values)?;
    let interval = lfp::solve_bounds(&table, &bx)?;
    let sigma2_hi = sigma2_hat(&table, &interval.w_hi, interval.beta_hi)?;
    Ok(Population {
        values,
        table,
        interval,
        sigma2_hi,
    })
}

/// `[beta_L, beta_H]` of the large finite draw.
pub fn approximate_population_interval(spec: &ExperimentSpec) -> Result<(f64, f64)> {
    let p = approximate_population(spec)?;
    Ok((p.interval.beta_lo, p.interval.beta_hi))
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

fn contains_unweighted(table: &SupportTable, ie: &IntervalEstimate) -> bool {
    table
        .unweighted()
        .map(|u| ie.beta_lo - 1e-12 <= u && u <= ie.beta_hi + 1e-12)
        .unwrap_or(false)
}

/// Mean bias of both endpoints per sample size.
pub fn run_bias_experiment(spec: &ExperimentSpec, pop: &Population, exec: Exec) -> Result<(Table, usize)> {
    let bx = spec.weight_box.weight_box()?;
    let mut t = Table::new(
        "bias",
        &["n", "replicates", "mean_bias_lo", "mean_bias_hi", "mc_se_lo", "mc_se_hi"],
    );
    let mut violations = 0;
    for (ni, &n) in spec.n_grid.iter().enumerate() {
        let res = exec.map(spec.replicates, |r| -> Result<(f64, f64, bool)> {
            let vals = subsample(&pop.values, n, &mut replicate_rng(spec, ni as u64, r));
            let (table, _) = mean_table(&vals)?;
            let ie = lfp::solve_bounds(&table, &bx)?;
            Ok((ie.beta_lo - pop.interval.beta_lo, ie.beta_hi - pop.interval.beta_hi, contains_unweighted(&table, &ie)))
        });
        let res = res.into_iter().collect::<Result<Vec<_>>>()?;
        violations += res.iter().filter(|r| !r.2).count();
        let (ml, sl) = mean_and_se(&res.iter().map(|r| r.0).collect::<Vec<_>>());
        let (mh, sh) = mean_and_se(&res.iter().map(|r| r.1).collect::<Vec<_>>());
        t.push(vec![n.into(), spec.replicates.into(), ml.into(), mh.into(), sl.into(), sh.into()]);
    }
    Ok((t, violations))
}

/// Coverage of the population interval by the asymptotic and bootstrap CIs.
pub fn run_coverage_experiment(spec: &ExperimentSpec, pop: &Population, exec: Exec) -> Result<Table> {
    let bx = spec.weight_box.weight_box()?;
    let (bl, bh) = (pop.interval.beta_lo, pop.interval.beta_hi);
    let mut t = Table::new("coverage", &["n", "method", "coverage", "mean_width", "replicates"]);
    for (ni, &n) in spec.n_grid.iter().enumerate() {
        let res = exec.map(spec.replicates, |r| -> Result<[(bool, f64); 2]> {
            let vals = subsample(&pop.values, n, &mut replicate_rng(spec, ni as u64, r));
            let (table, row_cell) = mean_table(&vals)?;
            let ie = lfp::solve_bounds(&table, &bx)?;
            let asym = confidence_interval(&ie, &table, spec.alpha)?;
            let boot_seed = spec.seed ^ ((ni as u64 + 1) << 48) ^ r as u64;
            let boot = Resampler::from_parts(table, row_cell).bootstrap(
                &bx,
                spec.bootstrap.resamples,
                spec.alpha,
                boot_seed,
                Exec::Sequential,
            )?;
            Ok([(asym.contains(bl, bh), asym.width()), (boot.contains(bl, bh), boot.width())])
        });
        let res = res.into_iter().collect::<Result<Vec<_>>>()?;
        for (m, name) in ["asymptotic", "bootstrap"].iter().enumerate() {
            let cov = res.iter().filter(|x| x[m].0).count() as f64 / res.len() as f64;
            let width = res.iter().map(|x| x[m].1).sum::<f64>() / res.len() as f64;
            t.push(vec![n.into(), (*name).into(), cov.into(), width.into(), spec.replicates.into()]);
        }
    }
    Ok(t)
}

/// Rejection frequency of `H0: beta in [beta_L, beta_H]` at each `beta_tilde`.
pub fn run_power_experiment(spec: &ExperimentSpec, pop: &Population, beta_tilde: &[f64], exec: Exec) -> Result<Table> {
    let bx = spec.weight_box.weight_box()?;
    let n = spec.power.n;
    let res = exec.map(spec.replicates, |r| -> Result<Vec<bool>> {
        let vals = subsample(&pop.values, n, &mut replicate_rng(spec, POWER_TAG, r));
        let (table, _) = mean_table(&vals)?;
        let ie = lfp::solve_bounds(&table, &bx)?;
        let (sl, sh) = endpoint_standard_errors(&ie, &table)?;
        Ok(beta_tilde
            .iter()
            .map(|&b| p_value_from_parts(ie.beta_lo, ie.beta_hi, sl, sh, b) < spec.power.level)
            .collect())
    });
    let res = res.into_iter().collect::<Result<Vec<_>>>()?;
    let mut t = Table::new("power", &["beta_tilde", "rejection_rate", "n", "replicates"]);
    for (j, &b) in beta_tilde.iter().enumerate() {
        let rate = res.iter().filter(|x| x[j]).count() as f64 / res.len() as f64;
        t.push(vec![b.into(), rate.into(), n.into(), spec.replicates.into()]);
    }
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct SamplingResult {
    pub table: Table,
    pub draws: Vec<f64>,
    pub ks_distance: f64,
    pub fitted_mean: f64,
    pub fitted_sd: f64,
}

/// Kolmogorov-Smirnov distance between `draws` and a normal distribution.
pub fn ks_normal(draws: &[f64], mean: f64, sd: f64) -> f64 {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = if sd > 0.0 {
                normal_cdf((v - mean) / sd)
            } else if v >= mean {
                1.0
            } else {
                0.0
            };
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Draws of the upper endpoint at sample size `n` and the fitted limiting
/// normal `N(beta_H, sigma^2(w_H) / n)`.
pub fn run_sampling_distribution(spec: &ExperimentSpec, pop: &Population, n: usize, exec: Exec) -> Result<SamplingResult> {
    let bx = spec.weight_box.weight_box()?;
    let h = &spec.histogram;
    let draws = exec
        .map(h.replicates, |r| -> Result<f64> {
            let vals = subsample(&pop.values, n, &mut replicate_rng(spec, HISTOGRAM_TAG | n as u64, r));
            let (table, _) = mean_table(&vals)?;
            Ok(lfp::solve_bounds(&table, &bx)?.beta_hi)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fitted_mean = pop.interval.beta_hi;
    let fitted_sd = (pop.sigma2_hi / n as f64).sqrt();
    let ks_distance = ks_normal(&draws, fitted_mean, fitted_sd);
    let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / h.bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; h.bins];
    for &d in &draws {
        let b = (((d - lo) / width) as usize).min(h.bins - 1);
        counts[b] += 1;
    }
    let mut table = Table::new("histogram", &["bin_lo", "bin_hi", "count", "density", "normal_density"]);
    for (b, &c) in counts.iter().enumerate() {
        let (l, u) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
        let mid = 0.5 * (l + u);
        let nd = if fitted_sd > 0.0 {
            (-0.5 * ((mid - fitted_mean) / fitted_sd).powi(2)).exp() / (fitted_sd * (2.0 * std::f64::consts::PI).sqrt())
        } else {
            0.0
        };
        table.push(vec![l.into(), u.into(), c.into(), (c as f64 / (draws.len() as f64 * width)).into(), nd.into()]);
    }
    Ok(SamplingResult {
        table,
        draws,
        ks_distance,
        fitted_mean,
        fitted_sd,
    })
}

#[derive(Debug, Clone)]
pub struct ConstraintSimResult {
    pub coverage: Table,
    pub width_vs_split: Table,
    /// Population constrained interval.
    pub population_interval: (f64, f64),
    pub theorem3_coverage: f64,
    /// Fraction of replicates whose constrained interval is narrower than the
    /// unconstrained one.
    pub narrower_fraction: f64,
    /// Fraction of replicates where the population optimizers satisfy the
    /// relaxed sample constraint.
    pub feasibility_rate: f64,
    pub mean_widths: Vec<f64>,
    pub unconstrained_width: f64,
    pub best_split: usize,
    pub max_kkt_residual: f64,
}

struct ConsimReplicate {
    covered: bool,
    unconstrained_covered: bool,
    narrower: bool,
    feasible: bool,
    t3_width: f64,
    unconstrained_ci_width: f64,
    kkt: f64,
}

/// Binomial-sum design with a covariate-mean constraint: Theorem-3 coverage
/// and the width of the constrained interval across level splits.
pub fn run_constraint_simulation(spec: &ExperimentSpec, exec: Exec) -> Result<ConstraintSimResult> {
    let c = &spec.constraint;
    let bx = spec.weight_box.weight_box()?;
    let design = BinomialSumDesign::new(c.trials)?;
    let pop = design.population_table()?;
    let u: Vec<f64> = (0..pop.k()).map(|k| pop.phat()[k] * (pop.point(k)[0] - c.qbar)).collect();
    let (_, w_lo0) = lfp::solve_with_equality(&pop, &bx, &u, 0.0, Direction::Min)?;
    let (_, w_hi0) = lfp::solve_with_equality(&pop, &bx, &u, 0.0, Direction::Max)?;
    let b_lo0 = crate::support::evaluate(&pop, &w_lo0)?;
    let b_hi0 = crate::support::evaluate(&pop, &w_hi0)?;
    let pop_unconstrained = lfp::solve_bounds(&pop, &bx)?;
    let (a1, a2) = c.alphas()?;
    let total = a1 + a2;
    let est = Estimand::mean(1);
    let sample_table = |r: usize| -> Result<SupportTable> {
        let mut rng = substream(spec.seed, domain::CONSIM, r as u64);
        collapse_support(&design.sample(c.n, &mut rng)?, &est)
    };
    let opts = |r: usize| SolverOptions {
        multistarts: c.multistarts,
        seed: spec.seed ^ r as u64,
        exec: Exec::Sequential,
        ..Default::default()
    };
    let reps = exec
        .map(spec.replicates, |r| -> Result<ConsimReplicate> {
            let table = sample_table(r)?;
            let ie = lfp::solve_bounds(&table, &bx)?;
            let un = confidence_interval(&ie, &table, total)?;
            let cons = [AuxConstraint::covariate_mean(0, c.qbar, a1)];
            let ci = solve_constrained_bounds(&table, &bx, &cons, a1, a2, &opts(r))?;
            let t3 = theorem3_ci(&table, &ci)?;
            let relaxed = build_relaxed_constraint(&cons[0], &table, &bx, table.n())?;
            let mapped = |w0: &[f64]| -> Vec<f64> {
                (0..table.k())
                    .map(|k| w0[design.cell_of(table.point(k)[0], table.point(k)[1])])
                    .collect()
            };
            let feasible = relaxed.is_satisfied(table.phat(), &mapped(&w_lo0), 0.0)
                && relaxed.is_satisfied(table.phat(), &mapped(&w_hi0), 0.0);
            Ok(ConsimReplicate {
                covered: t3.contains(b_lo0, b_hi0),
                unconstrained_covered: un.contains(pop_unconstrained.beta_lo, pop_unconstrained.beta_hi),
                narrower: ci.width() < ie.width(),
                feasible,
                t3_width: t3.width(),
                unconstrained_ci_width: un.width(),
                kkt: ci.diagnostics.best_kkt_residual,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let frac = |f: &dyn Fn(&ConsimReplicate) -> bool| reps.iter().filter(|r| f(r)).count() as f64 / reps.len() as f64;
    let mean = |f: &dyn Fn(&ConsimReplicate) -> f64| reps.iter().map(f).sum::<f64>() / reps.len() as f64;
    let theorem3_coverage = frac(&|r| r.covered);
    let mut coverage = Table::new(
        "coverage",
        &["method", "n", "alpha1", "alpha2", "coverage", "mean_width", "replicates"],
    );
    coverage.push(vec![
        "theorem3".into(),
        c.n.into(),
        a1.into(),
        a2.into(),
        theorem3_coverage.into(),
        mean(&|r| r.t3_width).into(),
        spec.replicates.into(),
    ]);
    coverage.push(vec![
        "unconstrained_asymptotic".into(),
        c.n.into(),
        0.0.into(),
        total.into(),
        frac(&|r| r.unconstrained_covered).into(),
        mean(&|r| r.unconstrained_ci_width).into(),
        spec.replicates.into(),
    ]);

    let grid = c.split_grid(total);
    let shares = [AuxConstraint::covariate_mean(0, c.qbar, 1.0)];
    let widths = exec
        .map(c.width_replicates, |r| -> Result<(Vec<f64>, f64)> {
            let table = sample_table(r)?;
            let tuned = tune_alpha_split(&table, &bx, &shares, total, &grid, &opts(r))?;
            let ie = lfp::solve_bounds(&table, &bx)?;
            let un = confidence_interval(&ie, &table, total)?;
            Ok((tuned.results.iter().map(|s| s.width()).collect(), un.width()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let m = widths.len() as f64;
    let mean_widths: Vec<f64> = (0..grid.len())
        .map(|i| widths.iter().map(|w| w.0[i]).sum::<f64>() / m)
        .collect();
    let unconstrained_width = widths.iter().map(|w| w.1).sum::<f64>() / m;
    let mut width_vs_split = Table::new("width_vs_split", &["kind", "alpha1", "alpha2", "mean_width", "replicates"]);
    for (i, &(s1, s2)) in grid.iter().enumerate() {
        width_vs_split.push(vec![
            "constrained".into(),
            s1.into(),
            s2.into(),
            mean_widths[i].into(),
            c.width_replicates.into(),
        ]);
    }
    width_vs_split.push(vec![
        "unconstrained".into(),
        0.0.into(),
        total.into(),
        unconstrained_width.into(),
        c.width_replicates.into(),
    ]);
    let mut best_split = 0;
    for i in 1..mean_widths.len() {
        if mean_widths[i] < mean_widths[best_split] {
            best_split = i;
        }
    }
    Ok(ConstraintSimResult {
        coverage,
        width_vs_split,
        population_interval: (b_lo0, b_hi0),
        theorem3_coverage,
        narrower_fraction: frac(&|r| r.narrower),
        feasibility_rate: frac(&|r| r.feasible),
        mean_widths,
        unconstrained_width,
        best_split,
        max_kkt_residual: reps.iter().map(|r| r.kkt).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

/// Runs every output requested by the spec.
pub fn run_experiment(spec: &ExperimentSpec, exec: Exec) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut tables = Vec::new();
    let mut summary = BTreeMap::new();
    let mut notes = Vec::new();
    if let Generator::BinomialSumConstraint = spec.generator {
        let res = run_constraint_simulation(spec, exec)?;
        summary.insert("population_constrained_lo".into(), res.population_interval.0);
        summary.insert("population_constrained_hi".into(), res.population_interval.1);
        summary.insert("theorem3_coverage".into(), res.theorem3_coverage);
        summary.insert("narrower_fraction".into(), res.narrower_fraction);
        summary.insert("feasibility_rate".into(), res.feasibility_rate);
        summary.insert("best_split_alpha1".into(), res.width_vs_split.numbers("alpha1")[res.best_split]);
        summary.insert("max_kkt_residual".into(), res.max_kkt_residual);
        notes.push("replicates are iid draws of size n from the binomial design".into());
        if spec.outputs.contains(&Metric::ConstraintCoverage) {
            tables.push(res.coverage);
        }
        if spec.outputs.contains(&Metric::WidthVsSplit) {
            tables.push(res.width_vs_split);
        }
        return Ok(ExperimentResult { tables, summary, notes });
    }
    let pop = approximate_population(spec)?;
    summary.insert("population_beta_lo".into(), pop.interval.beta_lo);
    summary.insert("population_beta_hi".into(), pop.interval.beta_hi);
    summary.insert("population_sigma2_hi".into(), pop.sigma2_hi);
    for m in &spec.outputs {
        match m {
            Metric::Bias => {
                let (t, violations) = run_bias_experiment(spec, &pop, exec)?;
                summary.insert("containment_violations".into(), violations as f64);
                tables.push(t);
            }
            Metric::Coverage => tables.push(run_coverage_experiment(spec, &pop, exec)?),
            Metric::Power => tables.push(run_power_experiment(spec, &pop, &spec.power.beta_tilde, exec)?),
            Metric::Histogram => {
                let s = run_sampling_distribution(spec, &pop, spec.histogram.n, exec)?;
                summary.insert("ks_distance".into(), s.ks_distance);
                summary.insert("fitted_mean".into(), s.fitted_mean);
                summary.insert("fitted_sd".into(), s.fitted_sd);
                notes.push("limiting normal variance uses sigma^2(w_H) of the population draw".into());
                tables.push(s.table);
            }
            Metric::ConstraintCoverage | Metric::WidthVsSplit => unreachable!("rejected by validate"),
        }
    }
    Ok(ExperimentResult { tables, summary, notes })
}

#[cfg(test)]
mod tests {
    use super::super::{BoxSpec, ExperimentSpec, Metric};
    use super::*;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            generator: Generator::StdNormalMean,
            n_population: 20_000,
            n_grid: vec![100, 20_000],
            replicates: 100,
            weight_box: BoxSpec { a: 0.1, b: 1.0 },
            alpha: 0.05,
            seed: 11,
            outputs: vec![Metric::Bias, Metric::Power, Metric::Histogram],
            bootstrap: Default::default(),
            power: super::super::PowerSpec {
                beta_tilde: vec![-2.0, 0.0, 2.0],
                ..Default::default()
            },
            histogram: super::super::HistogramSpec {
                replicates: 200,
                ..Default::default()
            },
            constraint: Default::default(),
        }
    }

    #[test]
    fn mean_table_counts_duplicates() {
        let (t, cells) = mean_table(&[2.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.f(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.phat(), &[0.25, 0.5, 0.25]);
        assert_eq!(cells, vec![1, 0, 1, 2]);
    }

    #[test]
    fn subsample_has_no_duplicates() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let mut s = subsample(&values, 300, &mut substream(1, 2, 3));
        s.sort_by(f64::total_cmp);
        s.dedup();
        assert_eq!(s.len(), 300);
    }

    #[test]
    fn full_subsample_has_zero_bias() {
        let spec = small_spec();
        let pop = approximate_population(&spec).unwrap();
        let (t, violations) = run_bias_experiment(&spec, &pop, Exec::default()).unwrap();
        assert_eq!(violations, 0);
        let lo = t.numbers("mean_bias_lo");
        let hi = t.numbers("mean_bias_hi");
        assert_eq!((lo[1], hi[1]), (0.0, 0.0));
    }

    #[test]
    fn equal_box_gives_the_draw_mean() {
        let mut spec = small_spec();
        spec.weight_box = BoxSpec { a: 0.5, b: 0.5 };
        let (lo, hi) = approximate_population_interval(&spec).unwrap();
        assert_eq!(lo, hi);
        assert!(lo.abs() < 0.03);
    }

    #[test]
    fn deterministic_across_strategies() {
        let spec = small_spec();
        let a = run_experiment(&spec, Exec::Sequential).unwrap();
        let b = run_experiment(&spec, Exec::Parallel).unwrap();
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn ks_distance_of_exact_quantiles_is_small() {
        let draws: Vec<f64> = (1..1000)
            .map(|i| statrs::distribution::ContinuousCDF::inverse_cdf(&statrs::distribution::Normal::new(1.0, 2.0).unwrap(), i as f64 / 1000.0))
            .collect();
        assert!(ks_normal(&draws, 1.0, 2.0) < 2e-3);
        assert!(ks_normal(&draws, 3.0, 2.0) > 0.3);
    }
}
