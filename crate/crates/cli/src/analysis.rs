//! The `analyze` and `tune-split` pipelines and their reports.

use std::fmt::Write as _;

use serde::Serialize;
use selection_bounds::bootstrap::Resampler;
use selection_bounds::constraints::{
    allocate_shares, solve_constrained_bounds, theorem3_ci, tune_alpha_split, AuxConstraint, SolverOptions,
};
use selection_bounds::inference::{ci_from_parts, confidence_interval, p_value, sigma2_hat, AsymptoticCI};
use selection_bounds::lfp::solve_bounds;
use selection_bounds::parametric::{solve_parametric_bounds_with, ParametricFamily, ParametricOptions};
use selection_bounds::simharness::{fmt12, Table, Value};
use selection_bounds::{collapse_support, Estimand, Exec, ObservationSet, SupportTable};

use crate::config::{AnalysisConfig, ConstraintItem, EstimandName};
use crate::error::{CliError, InModule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ci {
    pub c_lo: f64,
    pub c_hi: f64,
    pub se_lo: f64,
    pub se_hi: f64,
}

impl From<&AsymptoticCI> for Ci {
    fn from(ci: &AsymptoticCI) -> Self {
        Self {
            c_lo: ci.c_lo,
            c_hi: ci.c_hi,
            se_lo: ci.se_lo,
            se_hi: ci.se_hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSection {
    pub estimate: f64,
    pub ci: Ci,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSection {
    pub c_lo: f64,
    pub c_hi: f64,
    pub resamples: usize,
    pub redrawn: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PValue {
    pub beta: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnconstrainedSection {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub ci: Ci,
    pub bootstrap: Option<BootstrapSection>,
    pub degenerate_cells_lo: Vec<usize>,
    pub degenerate_cells_hi: Vec<usize>,
    pub p_values: Vec<PValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedSection {
    pub constraints: Vec<String>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub theorem3_ci: Ci,
    pub restarts: usize,
    pub best_kkt_residual: f64,
    pub kkt_target_met: bool,
    pub feasibility_slacks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParametricSection {
    pub columns: Vec<String>,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub alpha_lo: Vec<f64>,
    pub alpha_hi: Vec<f64>,
    pub restarts: usize,
    pub active_constraints: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub estimand: String,
    pub n: usize,
    pub cells: usize,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub point: PointSection,
    pub unconstrained: UnconstrainedSection,
    pub constrained: Option<ConstrainedSection>,
    pub parametric: Option<ParametricSection>,
}

/// Observations and estimand of a config, after optional binning.
pub fn prepare(cfg: &AnalysisConfig, obs: ObservationSet) -> Result<(ObservationSet, Estimand), CliError> {
    let obs = match cfg.bin_continuous {
        Some(step) => obs.binned(step).in_module("estimand")?,
        None => obs,
    };
    let col = |name: &str| obs.column_index(name).map_err(|e| CliError::Data(e.to_string()));
    let e = &cfg.estimand;
    let est = match e.kind {
        EstimandName::Mean => Estimand::mean(col(&e.y)?),
        EstimandName::Ols => Estimand::ols(col(e.x.as_deref().unwrap_or_default())?, col(&e.y)?),
        EstimandName::Iv => Estimand::iv(
            col(e.z.as_deref().unwrap_or_default())?,
            col(e.x.as_deref().unwrap_or_default())?,
            col(&e.y)?,
        ),
    };
    Ok((obs, est))
}

/// Library constraints with relative shares, columns resolved against `obs`.
pub fn aux_constraints(items: &[ConstraintItem], obs: &ObservationSet) -> Result<Vec<AuxConstraint>, CliError> {
    let col = |name: &str| obs.column_index(name).map_err(|e| CliError::Data(e.to_string()));
    items
        .iter()
        .map(|item| {
            Ok(match item {
                ConstraintItem::ResponseRate { r, share } => AuxConstraint::response_rate(*r, *share),
                ConstraintItem::CovariateMean { column, qbar, share } => {
                    AuxConstraint::covariate_mean(col(column)?, *qbar, *share)
                }
                ConstraintItem::LinearMoment { coefficients, intercept, share } => {
                    let terms: Vec<(usize, f64)> = coefficients
                        .iter()
                        .map(|(c, &v)| col(c).map(|j| (j, v)))
                        .collect::<Result<_, _>>()?;
                    let intercept = *intercept;
                    AuxConstraint::generic(
                        move |row: &[f64]| terms.iter().map(|&(j, v)| v * row[j]).sum::<f64>() + intercept,
                        *share,
                    )
                }
            })
        })
        .collect()
}

fn point_section(table: &SupportTable, alpha: f64) -> Result<PointSection, CliError> {
    let estimate = table.unweighted().in_module("support")?;
    let ones = vec![1.0; table.k()];
    let se = sigma2_hat(table, &ones, estimate).in_module("inference")?.sqrt() / (table.n() as f64).sqrt();
    let ci = ci_from_parts(estimate, estimate, se, se, table.n(), alpha).in_module("inference")?;
    Ok(PointSection { estimate, ci: (&ci).into() })
}

pub fn run_analysis(cfg: &AnalysisConfig, obs: ObservationSet, exec: Exec) -> Result<Report, CliError> {
    let bx = cfg.weight_box()?;
    let (obs, est) = prepare(cfg, obs)?;
    let table = collapse_support(&obs, &est).in_module("support")?;
    log::info!("{} rows collapsed onto {} cells", table.n(), table.k());
    let point = point_section(&table, cfg.alpha)?;

    let ie = solve_bounds(&table, &bx).in_module("lfp")?;
    let ci = confidence_interval(&ie, &table, cfg.alpha).in_module("inference")?;
    let bootstrap = match &cfg.bootstrap {
        Some(b) => {
            let seed = b.seed.unwrap_or(cfg.seed);
            let rs = Resampler::new(&obs, &est).in_module("bootstrap")?;
            let bci = rs.bootstrap(&bx, b.resamples, cfg.alpha, seed, exec).in_module("bootstrap")?;
            Some(BootstrapSection {
                c_lo: bci.c_lo,
                c_hi: bci.c_hi,
                resamples: bci.r,
                redrawn: bci.redrawn,
                seed,
            })
        }
        None => None,
    };
    let p_values = cfg
        .test_values
        .iter()
        .map(|&beta| p_value(&ie, &table, beta).map(|p| PValue { beta, p }))
        .collect::<selection_bounds::Result<Vec<_>>>()
        .in_module("inference")?;
    let unconstrained = UnconstrainedSection {
        beta_lo: ie.beta_lo,
        beta_hi: ie.beta_hi,
        ci: (&ci).into(),
        bootstrap,
        degenerate_cells_lo: ie.degenerate_cells_lo.clone(),
        degenerate_cells_hi: ie.degenerate_cells_hi.clone(),
        p_values,
    };

    let constrained = match &cfg.constraints {
        Some(c) => {
            let (a1, a2) = c.significance()?;
            let cons = aux_constraints(&c.items, &obs)?;
            let cons = allocate_shares(&cons, a1).in_module("constraints")?;
            let opts = SolverOptions {
                multistarts: c.multistarts,
                seed: cfg.seed,
                exec,
                ..Default::default()
            };
            let res = solve_constrained_bounds(&table, &bx, &cons, a1, a2, &opts).in_module("constraints")?;
            let t3 = theorem3_ci(&table, &res).in_module("constraints")?;
            Some(ConstrainedSection {
                constraints: c.items.iter().zip(&cons).map(|(i, a)| label(i, a.alpha_share)).collect(),
                alpha1: a1,
                alpha2: a2,
                beta_lo: res.beta_lo,
                beta_hi: res.beta_hi,
                theorem3_ci: (&t3).into(),
                restarts: res.diagnostics.restarts,
                best_kkt_residual: res.diagnostics.best_kkt_residual,
                kkt_target_met: res.diagnostics.kkt_target_met,
                feasibility_slacks: res.diagnostics.feasibility_slacks.clone(),
            })
        }
        None => None,
    };

    let parametric = match &cfg.parametric {
        Some(p) => {
            let mut family = ParametricFamily::logit(p.columns.clone());
            family.link = p.link;
            if let Some(signs) = &p.signs {
                family = family.with_signs(signs.clone());
            }
            let opts = ParametricOptions {
                multistarts: p.multistarts,
                seed: cfg.seed,
                exec,
            };
            let res = solve_parametric_bounds_with(&obs, &est, &bx, &family, &opts).in_module("parametric")?;
            Some(ParametricSection {
                columns: p.columns.clone(),
                beta_lo: res.beta_lo,
                beta_hi: res.beta_hi,
                alpha_lo: res.alpha_lo,
                alpha_hi: res.alpha_hi,
                restarts: res.diagnostics.restarts,
                active_constraints: res.diagnostics.active_constraints,
            })
        }
        None => None,
    };

    Ok(Report {
        estimand: format!("{:?}", cfg.estimand.kind).to_lowercase(),
        n: table.n(),
        cells: table.k(),
        a: bx.a(),
        b: bx.b(),
        alpha: cfg.alpha,
        point,
        unconstrained,
        constrained,
        parametric,
    })
}

/// Scans `split_points` interior splits of `alpha1 + alpha2`.
pub fn run_tune_split(cfg: &AnalysisConfig, obs: ObservationSet, exec: Exec) -> Result<(Table, usize), CliError> {
    let c = cfg
        .constraints
        .as_ref()
        .ok_or_else(|| CliError::config("constraints", "tune-split needs a [constraints] section"))?;
    let bx = cfg.weight_box()?;
    let (obs, est) = prepare(cfg, obs)?;
    let table = collapse_support(&obs, &est).in_module("support")?;
    let (a1, a2) = c.significance()?;
    let total = a1 + a2;
    let m = c.split_points + 1;
    let grid: Vec<(f64, f64)> = (1..m)
        .map(|i| {
            let x = total * i as f64 / m as f64;
            (x, total - x)
        })
        .collect();
    let cons = aux_constraints(&c.items, &obs)?;
    let opts = SolverOptions {
        multistarts: c.multistarts,
        seed: cfg.seed,
        exec,
        ..Default::default()
    };
    let tuned = tune_alpha_split(&table, &bx, &cons, total, &grid, &opts).in_module("constraints")?;
    let mut out = Table::new("splits", &["alpha1", "alpha2", "beta_lo", "beta_hi", "c_lo", "c_hi", "width", "best"]);
    for (i, r) in tuned.results.iter().enumerate() {
        out.push(vec![
            r.alpha1.into(),
            r.alpha2.into(),
            r.interval.0.into(),
            r.interval.1.into(),
            r.ci.c_lo.into(),
            r.ci.c_hi.into(),
            r.width().into(),
            Value::Int(u64::from(i == tuned.best)),
        ]);
    }
    Ok((out, tuned.best))
}

fn label(item: &ConstraintItem, share: f64) -> String {
    let what = match item {
        ConstraintItem::ResponseRate { r, .. } => format!("response rate {}", fmt12(*r)),
        ConstraintItem::CovariateMean { column, qbar, .. } => format!("mean of {column} = {}", fmt12(*qbar)),
        ConstraintItem::LinearMoment { coefficients, intercept, .. } => {
            let terms: Vec<String> = coefficients.iter().map(|(c, v)| format!("{} {c}", fmt12(*v))).collect();
            format!("E[{} + {}] <= 0", terms.join(" + "), fmt12(*intercept))
        }
    };
    format!("{what} (alpha share {})", fmt12(share))
}

fn interval(lo: f64, hi: f64) -> String {
    format!("[{}, {}]", fmt12(lo), fmt12(hi))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let level = fmt12(100.0 * (1.0 - self.alpha));
        let _ = writeln!(s, "estimand            {}", self.estimand);
        let _ = writeln!(s, "observations        {} ({} support cells)", self.n, self.cells);
        let _ = writeln!(s, "box                 a = {}, b = {}", fmt12(self.a), fmt12(self.b));
        let _ = writeln!(s);
        let _ = writeln!(s, "point estimate      {}", fmt12(self.point.estimate));
        let _ = writeln!(s, "  {level}% CI          {}", interval(self.point.ci.c_lo, self.point.ci.c_hi));
        let u = &self.unconstrained;
        let _ = writeln!(s);
        let _ = writeln!(s, "identified interval {}", interval(u.beta_lo, u.beta_hi));
        let _ = writeln!(s, "  {level}% CI          {}", interval(u.ci.c_lo, u.ci.c_hi));
        let _ = writeln!(s, "  standard errors   {}, {}", fmt12(u.ci.se_lo), fmt12(u.ci.se_hi));
        if let Some(b) = &u.bootstrap {
            let _ = writeln!(s, "  bootstrap CI      {} (R = {}, seed {})", interval(b.c_lo, b.c_hi), b.resamples, b.seed);
            if b.redrawn > 0 {
                let _ = writeln!(s, "  redrawn resamples {}", b.redrawn);
            }
        }
        if !u.degenerate_cells_lo.is_empty() || !u.degenerate_cells_hi.is_empty() {
            let _ = writeln!(s, "  degenerate cells  lower {:?}, upper {:?}", u.degenerate_cells_lo, u.degenerate_cells_hi);
        }
        for p in &u.p_values {
            let _ = writeln!(s, "  p-value at {}  {}", fmt12(p.beta), fmt12(p.p));
        }
        if let Some(c) = &self.constrained {
            let _ = writeln!(s);
            let _ = writeln!(s, "constrained interval {}", interval(c.beta_lo, c.beta_hi));
            let _ = writeln!(s, "  CI (alpha1 = {}, alpha2 = {}) {}", fmt12(c.alpha1), fmt12(c.alpha2), interval(c.theorem3_ci.c_lo, c.theorem3_ci.c_hi));
            for label in &c.constraints {
                let _ = writeln!(s, "  constraint        {label}");
            }
            let _ = writeln!(
                s,
                "  solver            {} starts, KKT residual {:e}{}",
                c.restarts,
                c.best_kkt_residual,
                if c.kkt_target_met { "" } else { " (above target)" }
            );
        }
        if let Some(p) = &self.parametric {
            let _ = writeln!(s);
            let _ = writeln!(s, "parametric interval {}", interval(p.beta_lo, p.beta_hi));
            let _ = writeln!(s, "  selection columns {}", p.columns.join(", "));
            let fmt_vec = |v: &[f64]| v.iter().map(|x| fmt12(*x)).collect::<Vec<_>>().join(", ");
            let _ = writeln!(s, "  coefficients lo   [{}]", fmt_vec(&p.alpha_lo));
            let _ = writeln!(s, "  coefficients hi   [{}]", fmt_vec(&p.alpha_hi));
        }
        s
    }
}
