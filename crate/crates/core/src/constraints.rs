//! Auxiliary population constraints on the weights.
//!
//! A known population moment `E[lambda(T) H(T)] = 0` is imposed on the sample
//! weights through a confidence relaxation. With `v_k = e_k w_k + o_k`,
//! `m = sum p v` and `s = sum p v^2`, the two-sided relaxation is
//!
//! ```text
//! (1 + c^2) m^2 <= c^2 s,        c = Z_{alpha/2} / sqrt(n)
//! ```
//!
//! and the one-sided form is `m <= c sqrt(s - m^2)` with `c = Z_alpha / sqrt(n)`.
//! The feasible region is not convex, so the optimizer combines frontier
//! starts from equality-constrained programs, an augmented Lagrangian with a
//! spectral projected gradient inner solver, and exact line moves.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::inference::{check_alpha, ci_from_parts, sigma2_hat, upper_quantile, AsymptoticCI};
use crate::lfp::{self, Direction};
use crate::rng::{domain, substream};
use crate::sum::CompensatedSum;
use crate::support::{evaluate, SupportTable, WeightBox};

/// How configured levels are read: as significance levels `alpha` or as
/// coverage levels `1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelConvention {
    #[default]
    Significance,
    Coverage,
}

impl LevelConvention {
    pub fn significance(self, level: f64) -> Result<f64> {
        let alpha = match self {
            LevelConvention::Significance => level,
            LevelConvention::Coverage => 1.0 - level,
        };
        check_alpha(alpha)?;
        Ok(alpha)
    }
}

pub type MomentFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ConstraintKind {
    /// Known response rate `r`: the mean sample weight is `1/r`.
    ResponseRate { r: f64 },
    /// Known population mean `qbar` of the covariate in column `column`.
    CovariateMean { column: usize, qbar: f64 },
    /// One-sided moment `E[lambda H] <= 0` for a user function `H`.
    GenericLinearMoment { h: MomentFn },
}

impl fmt::Debug for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintKind::ResponseRate { r } => write!(f, "ResponseRate {{ r: {r} }}"),
            ConstraintKind::CovariateMean { column, qbar } => {
                write!(f, "CovariateMean {{ column: {column}, qbar: {qbar} }}")
            }
            ConstraintKind::GenericLinearMoment { .. } => write!(f, "GenericLinearMoment"),
        }
    }
}

/// A constraint together with its share `alpha_1j` of the feasibility budget.
#[derive(Debug, Clone)]
pub struct AuxConstraint {
    pub kind: ConstraintKind,
    pub alpha_share: f64,
}

impl AuxConstraint {
    pub fn response_rate(r: f64, alpha_share: f64) -> Self {
        Self {
            kind: ConstraintKind::ResponseRate { r },
            alpha_share,
        }
    }

    pub fn covariate_mean(column: usize, qbar: f64, alpha_share: f64) -> Self {
        Self {
            kind: ConstraintKind::CovariateMean { column, qbar },
            alpha_share,
        }
    }

    pub fn generic<H>(h: H, alpha_share: f64) -> Self
    where
        H: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: ConstraintKind::GenericLinearMoment { h: Arc::new(h) },
            alpha_share,
        }
    }

    fn label(&self) -> String {
        match &self.kind {
            ConstraintKind::ResponseRate { r } => format!("response_rate(r={r})"),
            ConstraintKind::CovariateMean { column, qbar } => {
                format!("covariate_mean(column={column}, qbar={qbar})")
            }
            ConstraintKind::GenericLinearMoment { .. } => "generic_moment".to_string(),
        }
    }
}

/// Rescales relative shares so that they sum to `alpha1`.
pub fn allocate_shares(constraints: &[AuxConstraint], alpha1: f64) -> Result<Vec<AuxConstraint>> {
    let total: f64 = constraints.iter().map(|c| c.alpha_share).sum();
    if constraints.iter().any(|c| !(c.alpha_share > 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidArgument("constraint shares must be positive".into()));
    }
    Ok(constraints
        .iter()
        .map(|c| AuxConstraint {
            kind: c.kind.clone(),
            alpha_share: alpha1 * c.alpha_share / total,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
    OneSided,
}

/// A relaxed sample constraint `G(w) <= 0` over the cells of a table.
#[derive(Debug, Clone)]
pub struct RelaxedConstraint {
    pub label: String,
    pub sidedness: Sidedness,
    pub c: f64,
    e: Vec<f64>,
    o: Vec<f64>,
    /// `sum p (|e| hi + |o|)^2`, the magnitude of the quadratic terms.
    qscale: f64,
}

impl RelaxedConstraint {
    /// Constraint on `v_k = e_k w_k + o_k`.
    pub fn new(
        label: impl Into<String>,
        sidedness: Sidedness,
        c: f64,
        e: Vec<f64>,
        o: Vec<f64>,
        p: &[f64],
        hi: f64,
    ) -> Self {
        let q = crate::sum::sum((0..e.len()).map(|k| p[k] * (e[k].abs() * hi + o[k].abs()).powi(2)));
        Self {
            label: label.into(),
            sidedness,
            c,
            e,
            o,
            qscale: if q > 0.0 { q } else { 1.0 },
        }
    }

    fn scale(&self) -> f64 {
        match self.sidedness {
            Sidedness::TwoSided => self.qscale,
            Sidedness::OneSided => self.qscale.sqrt(),
        }
    }

    /// `(m, s)` at weights `w`.
    pub fn moments(&self, p: &[f64], w: &[f64]) -> (f64, f64) {
        let mut m = CompensatedSum::new();
        let mut s = CompensatedSum::new();
        for k in 0..w.len() {
            let v = self.e[k] * w[k] + self.o[k];
            m.add(p[k] * v);
            s.add(p[k] * v * v);
        }
        (m.value(), s.value())
    }

    fn raw(&self, m: f64, s: f64) -> f64 {
        let c2 = self.c * self.c;
        match self.sidedness {
            Sidedness::TwoSided => (1.0 + c2) * m * m - c2 * s,
            Sidedness::OneSided => m - self.c * (s - m * m).max(0.0).sqrt(),
        }
    }

    fn normalized(&self, m: f64, s: f64) -> f64 {
        self.raw(m, s) / self.scale()
    }

    /// Normalized constraint value; feasible when `<= 0`.
    pub fn value(&self, p: &[f64], w: &[f64]) -> f64 {
        let (m, s) = self.moments(p, w);
        self.normalized(m, s)
    }

    /// Left and right sides of the inequality as written for reporting.
    pub fn sides(&self, p: &[f64], w: &[f64]) -> (f64, f64) {
        let (m, s) = self.moments(p, w);
        let c2 = self.c * self.c;
        match self.sidedness {
            Sidedness::TwoSided => ((1.0 + c2) * m * m, c2 * s),
            Sidedness::OneSided => (m, self.c * (s - m * m).max(0.0).sqrt()),
        }
    }

    pub fn is_satisfied(&self, p: &[f64], w: &[f64], tol: f64) -> bool {
        self.value(p, w) <= tol
    }

    /// Adds `mult * grad G_norm(w)` to `out`.
    fn add_gradient(&self, p: &[f64], w: &[f64], m: f64, s: f64, mult: f64, out: &mut [f64]) {
        let c2 = self.c * self.c;
        match self.sidedness {
            Sidedness::TwoSided => {
                let f = mult / self.qscale;
                for k in 0..w.len() {
                    let pe = p[k] * self.e[k];
                    if pe != 0.0 {
                        let v = self.e[k] * w[k] + self.o[k];
                        out[k] += f * (2.0 * (1.0 + c2) * m * pe - 2.0 * c2 * pe * v);
                    }
                }
            }
            Sidedness::OneSided => {
                let scale = self.scale();
                let sd = (s - m * m).max(0.0).sqrt().max(1e-12 * scale);
                let f = mult / scale;
                for k in 0..w.len() {
                    let pe = p[k] * self.e[k];
                    if pe != 0.0 {
                        let v = self.e[k] * w[k] + self.o[k];
                        out[k] += f * (pe - self.c * pe * (v - m) / sd);
                    }
                }
            }
        }
    }
}

/// Relaxed form of `c` over the cells of `table`, for a sample of size `n`.
pub fn build_relaxed_constraint(
    c: &AuxConstraint,
    table: &SupportTable,
    bx: &WeightBox,
    n: usize,
) -> Result<RelaxedConstraint> {
    check_alpha(c.alpha_share)?;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let k = table.k();
    let p = table.phat();
    let sqrt_n = (n as f64).sqrt();
    let point_values = |f: &dyn Fn(&[f64]) -> f64| -> Result<Vec<f64>> {
        if !table.has_points() {
            return Err(Error::InvalidArgument(
                "constraint needs support points but the table has none".into(),
            ));
        }
        (0..k)
            .map(|i| {
                let v = f(table.point(i));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteEvaluation { row: i })
                }
            })
            .collect()
    };
    let label = c.label();
    match &c.kind {
        ConstraintKind::ResponseRate { r } => {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::InvalidArgument(format!("response rate {r} outside (0, 1]")));
            }
            let target = 1.0 / r;
            if target < bx.lo() || target > bx.hi() {
                return Err(Error::InfeasibleByConstruction(format!(
                    "inverse response rate {target} outside weight box [{}, {}]",
                    bx.lo(),
                    bx.hi()
                )));
            }
            let cn = upper_quantile(c.alpha_share / 2.0)? / sqrt_n;
            Ok(RelaxedConstraint::new(
                label,
                Sidedness::TwoSided,
                cn,
                vec![1.0; k],
                vec![-target; k],
                p,
                bx.hi(),
            ))
        }
        ConstraintKind::CovariateMean { column, qbar } => {
            let col = *column;
            if table.has_points() && col >= table.point(0).len() {
                return Err(Error::InvalidArgument(format!("covariate column {col} out of range")));
            }
            let q = point_values(&|t: &[f64]| t[col])?;
            let cn = upper_quantile(c.alpha_share / 2.0)? / sqrt_n;
            Ok(RelaxedConstraint::new(
                label,
                Sidedness::TwoSided,
                cn,
                q.iter().map(|x| x - qbar).collect(),
                vec![0.0; k],
                p,
                bx.hi(),
            ))
        }
        ConstraintKind::GenericLinearMoment { h } => {
            let hv = point_values(&|t: &[f64]| h(t))?;
            let cn = upper_quantile(c.alpha_share)? / sqrt_n;
            Ok(RelaxedConstraint::new(
                label,
                Sidedness::OneSided,
                cn,
                hv,
                vec![0.0; k],
                p,
                bx.hi(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Number of starting points per endpoint (deterministic starts included).
    pub multistarts: usize,
    /// Target KKT residual reported in diagnostics.
    pub kkt_tol: f64,
    /// Residual above which the best point is rejected as unconverged.
    pub max_kkt_residual: f64,
    /// Normalized constraint violation accepted as feasible.
    pub feas_tol: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            multistarts: 16,
            kkt_tol: 1e-7,
            max_kkt_residual: 1e-4,
            feas_tol: 1e-10,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub restarts: usize,
    /// Larger of the two endpoint KKT residuals.
    pub best_kkt_residual: f64,
    pub kkt_target_met: bool,
    /// Smallest slack `-G_norm` of each constraint over both endpoints.
    pub feasibility_slacks: Vec<f64>,
    /// Whether the unconstrained optimum already satisfied the constraints,
    /// per endpoint `(lo, hi)`.
    pub unconstrained_optimal: (bool, bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedInterval {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub diagnostics: SolverDiagnostics,
}

impl ConstrainedInterval {
    pub fn width(&self) -> f64 {
        self.beta_hi - self.beta_lo
    }
}

const LINE_TOL: f64 = 1e-12;

/// Objective and constraints of one endpoint problem, `max orient * R(w)`.
struct Engine<'a> {
    p: &'a [f64],
    a: Vec<f64>,
    c: Vec<f64>,
    orient: f64,
    cons: &'a [RelaxedConstraint],
    lo: f64,
    hi: f64,
    scale_r: f64,
}

#[derive(Clone)]
struct State {
    w: Vec<f64>,
    num: f64,
    den: f64,
    m: Vec<f64>,
    s: Vec<f64>,
}

struct Quad {
    dm: f64,
    ds1: f64,
    ds2: f64,
}

impl<'a> Engine<'a> {
    fn new(table: &'a SupportTable, cons: &'a [RelaxedConstraint], bx: &WeightBox, dir: Direction, scale_r: f64) -> Self {
        let p = table.phat();
        Self {
            p,
            a: (0..p.len()).map(|k| p[k] * table.f()[k]).collect(),
            c: (0..p.len()).map(|k| p[k] * table.g()[k]).collect(),
            orient: if dir == Direction::Max { 1.0 } else { -1.0 },
            cons,
            lo: bx.lo(),
            hi: bx.hi(),
            scale_r,
        }
    }

    fn k(&self) -> usize {
        self.p.len()
    }

    fn state(&self, w: Vec<f64>) -> State {
        let num = crate::sum::sum((0..w.len()).map(|k| w[k] * self.a[k]));
        let den = crate::sum::sum((0..w.len()).map(|k| w[k] * self.c[k]));
        let (m, s) = self.cons.iter().map(|c| c.moments(self.p, &w)).unzip();
        State { w, num, den, m, s }
    }

    fn objective(&self, st: &State) -> f64 {
        self.orient * st.num / st.den
    }

    fn violations(&self, st: &State) -> Vec<f64> {
        (0..self.cons.len())
            .map(|j| self.cons[j].normalized(st.m[j], st.s[j]))
            .collect()
    }

    fn max_violation(&self, st: &State) -> f64 {
        self.violations(st).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    fn quads(&self, st: &State, dir: &[(usize, f64)]) -> Vec<Quad> {
        self.cons
            .iter()
            .map(|c| {
                let mut q = Quad { dm: 0.0, ds1: 0.0, ds2: 0.0 };
                for &(i, d) in dir {
                    let pe = self.p[i] * c.e[i] * d;
                    let v = c.e[i] * st.w[i] + c.o[i];
                    q.dm += pe;
                    q.ds1 += 2.0 * pe * v;
                    q.ds2 += pe * c.e[i] * d;
                }
                q
            })
            .collect()
    }

    fn t_range(&self, st: &State, dir: &[(usize, f64)]) -> (f64, f64) {
        let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
        for &(i, d) in dir {
            if d > 0.0 {
                tmax = tmax.min((self.hi - st.w[i]) / d);
                tmin = tmin.max((self.lo - st.w[i]) / d);
            } else if d < 0.0 {
                tmax = tmax.min((self.lo - st.w[i]) / d);
                tmin = tmin.max((self.hi - st.w[i]) / d);
            }
        }
        (tmin.min(0.0), tmax.max(0.0))
    }

    fn violations_at(&self, st: &State, qs: &[Quad], t: f64) -> impl Iterator<Item = f64> + '_ {
        let (m, s) = (st.m.clone(), st.s.clone());
        let moved: Vec<(f64, f64)> = qs
            .iter()
            .enumerate()
            .map(|(j, q)| (m[j] + t * q.dm, s[j] + t * q.ds1 + t * t * q.ds2))
            .collect();
        (0..self.cons.len()).map(move |j| self.cons[j].normalized(moved[j].0, moved[j].1))
    }

    /// Breakpoints along the line where some constraint changes sign, plus
    /// stationary points of the quadratic forms.
    fn breakpoints(&self, st: &State, qs: &[Quad], tmin: f64, tmax: f64) -> Vec<f64> {
        let mut out = vec![0.0, tmin, tmax];
        let span = tmax - tmin;
        for (j, q) in qs.iter().enumerate() {
            let c2 = self.cons[j].c * self.cons[j].c;
            let (m, s) = (st.m[j], st.s[j]);
            let q2 = (1.0 + c2) * q.dm * q.dm - c2 * q.ds2;
            let q1 = 2.0 * (1.0 + c2) * m * q.dm - c2 * q.ds1;
            let q0 = (1.0 + c2) * m * m - c2 * s;
            for r in quadratic_roots(q2, q1, q0, span) {
                out.extend([r, r * (1.0 - 1e-11), r * (1.0 + 1e-11)]);
            }
            if q2 != 0.0 {
                out.push(-q1 / (2.0 * q2));
            }
            if self.cons[j].sidedness == Sidedness::OneSided && q.dm != 0.0 {
                out.push(-m / q.dm);
            }
        }
        out.retain(|t| t.is_finite() && *t >= tmin && *t <= tmax);
        out
    }

    /// Best feasible step along `dir`. The ratio is monotone on the line, so
    /// the farthest feasible breakpoint in the improving direction wins.
    fn line_move(&self, st: &State, dir: &[(usize, f64)]) -> Option<f64> {
        let da: f64 = dir.iter().map(|&(i, d)| d * self.a[i]).sum();
        let dc: f64 = dir.iter().map(|&(i, d)| d * self.c[i]).sum();
        let slope = self.orient * (da * st.den - st.num * dc);
        if slope.abs() <= 1e-14 * ((da * st.den).abs() + (st.num * dc).abs()) {
            return None;
        }
        let (tmin, tmax) = self.t_range(st, dir);
        let qs = self.quads(st, dir);
        let mut best: Option<f64> = None;
        for t in self.breakpoints(st, &qs, tmin, tmax) {
            if (slope > 0.0 && t <= 0.0) || (slope < 0.0 && t >= 0.0) {
                continue;
            }
            if best.is_some_and(|b| t.abs() <= b.abs()) {
                continue;
            }
            if self.violations_at(st, &qs, t).all(|v| v <= LINE_TOL) {
                best = Some(t);
            }
        }
        best
    }

    fn apply(&self, st: &mut State, dir: &[(usize, f64)], t: f64) {
        let qs = self.quads(st, dir);
        for (j, q) in qs.iter().enumerate() {
            st.m[j] += t * q.dm;
            st.s[j] += t * q.ds1 + t * t * q.ds2;
        }
        for &(i, d) in dir {
            let old = st.w[i];
            let mut nw = old + t * d;
            let snap = 1e-13 * self.hi;
            if (nw - self.lo).abs() <= snap || nw < self.lo {
                nw = self.lo;
            } else if (nw - self.hi).abs() <= snap || nw > self.hi {
                nw = self.hi;
            }
            st.w[i] = nw;
            st.num += (nw - old) * self.a[i];
            st.den += (nw - old) * self.c[i];
        }
    }

    /// Reduces the total violation by exact single-coordinate moves.
    fn restore_by_moves(&self, st: &mut State, tol: f64) -> bool {
        let merit = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x.max(0.0)).sum::<f64>();
        for _ in 0..200 {
            let current = merit(&mut self.violations(st).into_iter());
            if current <= tol {
                return true;
            }
            let mut best = (current, 0usize, 0.0);
            for i in 0..self.k() {
                let dir = [(i, 1.0)];
                let (tmin, tmax) = self.t_range(st, &dir);
                let qs = self.quads(st, &dir);
                for t in self.breakpoints(st, &qs, tmin, tmax) {
                    let v = merit(&mut self.violations_at(st, &qs, t));
                    if v < best.0 {
                        best = (v, i, t);
                    }
                }
            }
            if best.0 >= current * (1.0 - 1e-12) {
                return false;
            }
            self.apply(st, &[(best.1, 1.0)], best.2);
        }
        self.max_violation(st) <= tol
    }

    fn is_interior(&self, x: f64) -> bool {
        let gap = 1e-12 * self.hi;
        x > self.lo + gap && x < self.hi - gap
    }

    /// Exact coordinate and pair moves until no move improves the objective.
    fn polish(&self, st: &mut State, feas_tol: f64) -> bool {
        if self.max_violation(st) > feas_tol && !self.restore_by_moves(st, feas_tol) {
            return false;
        }
        for _ in 0..60 {
            let before = self.objective(st);
            for i in 0..self.k() {
                let dir = [(i, 1.0)];
                if let Some(t) = self.line_move(st, &dir) {
                    self.apply(st, &dir, t);
                }
            }
            let frac: Vec<usize> = (0..self.k()).filter(|&i| self.is_interior(st.w[i])).collect();
            if frac.len() <= 8 {
                let viol = self.violations(st);
                for &i in &frac {
                    for (j, c) in self.cons.iter().enumerate() {
                        if viol[j] < -1e-6 {
                            continue;
                        }
                        let ui = self.p[i] * c.e[i];
                        for k in 0..self.k() {
                            let uk = self.p[k] * c.e[k];
                            if k == i || (ui == 0.0 && uk == 0.0) {
                                continue;
                            }
                            let norm = ui.abs().max(uk.abs());
                            let dir = [(i, -uk / norm), (k, ui / norm)];
                            if let Some(t) = self.line_move(st, &dir) {
                                self.apply(st, &dir, t);
                            }
                        }
                    }
                }
            }
            *st = self.state(std::mem::take(&mut st.w));
            let after = self.objective(st);
            if after - before <= 1e-14 * after.abs().max(1.0) {
                break;
            }
        }
        self.max_violation(st) <= feas_tol
    }

    fn span(&self) -> f64 {
        self.hi - self.lo
    }

    fn to_w(&self, x: &[f64], w: &mut [f64]) {
        for k in 0..x.len() {
            w[k] = (self.lo + self.span() * x[k]).clamp(self.lo, self.hi);
        }
    }

    fn to_x(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|&v| ((v - self.lo) / self.span()).clamp(0.0, 1.0)).collect()
    }

    /// Normalized objective `-orient R / scale_r` and its gradient in `w`.
    fn phi(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let num: f64 = (0..w.len()).map(|k| w[k] * self.a[k]).sum();
        let den: f64 = (0..w.len()).map(|k| w[k] * self.c[k]).sum();
        let r = num / den;
        let f = -self.orient / (self.scale_r * den);
        for k in 0..w.len() {
            grad[k] = f * (self.a[k] - r * self.c[k]);
        }
        -self.orient * r / self.scale_r
    }

    fn constraint_values(&self, w: &[f64]) -> Vec<(f64, f64, f64)> {
        self.cons
            .iter()
            .map(|c| {
                let mut m = 0.0;
                let mut s = 0.0;
                for k in 0..w.len() {
                    let v = c.e[k] * w[k] + c.o[k];
                    m += self.p[k] * v;
                    s += self.p[k] * v * v;
                }
                (c.normalized(m, s), m, s)
            })
            .collect()
    }

    /// Minimizes the squared violation from `x`; true when feasible.
    fn restore_spg(&self, x: &mut Vec<f64>, tol: f64) -> bool {
        let k = self.k();
        let mut w = vec![0.0; k];
        let span = self.span();
        let f = |x: &[f64], g: &mut [f64]| -> f64 {
            let mut w = vec![0.0; x.len()];
            self.to_w(x, &mut w);
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for (j, (v, m, s)) in self.constraint_values(&w).into_iter().enumerate() {
                if v > 0.0 {
                    total += v * v;
                    self.cons[j].add_gradient(self.p, &w, m, s, 2.0 * v, g);
                }
            }
            g.iter_mut().for_each(|v| *v *= span);
            total
        };
        spg(&f, x, 1e-14, 300, Some(tol * tol));
        self.to_w(x, &mut w);
        self.constraint_values(&w).iter().all(|(v, _, _)| *v <= tol)
    }

    /// PHR augmented Lagrangian with spectral projected gradient inner solves.
    /// Returns the final point in `w` and the multiplier estimates.
    fn augmented_lagrangian(&self, x: &mut Vec<f64>, warm: Option<&[f64]>) -> Vec<f64> {
        let jn = self.cons.len();
        let mut lambda = warm.map_or_else(|| vec![0.0; jn], <[f64]>::to_vec);
        let mut rho = if warm.is_some() { 1e3 } else { 10.0 };
        let mut prev = f64::INFINITY;
        let span = self.span();
        for outer in 0..40 {
            let lam = lambda.clone();
            let f = |x: &[f64], g: &mut [f64]| -> f64 {
                let mut w = vec![0.0; x.len()];
                self.to_w(x, &mut w);
                let mut val = self.phi(&w, g);
                for (j, (v, m, s)) in self.constraint_values(&w).into_iter().enumerate() {
                    let shifted = (lam[j] + rho * v).max(0.0);
                    val += (shifted * shifted - lam[j] * lam[j]) / (2.0 * rho);
                    if shifted > 0.0 {
                        self.cons[j].add_gradient(self.p, &w, m, s, shifted, g);
                    }
                }
                g.iter_mut().for_each(|v| *v *= span);
                val
            };
            let tol = (0.1f64).powi(outer + 3).max(1e-10);
            let pg = spg(&f, x, tol, 400, None);
            let mut w = vec![0.0; x.len()];
            self.to_w(x, &mut w);
            let vals = self.constraint_values(&w);
            let mut measure = 0.0f64;
            for j in 0..jn {
                let v = vals[j].0;
                measure = measure.max(v.max(-lambda[j] / rho).abs());
                lambda[j] = (lambda[j] + rho * v).max(0.0);
            }
            if measure <= 1e-11 && pg <= 1e-9 {
                break;
            }
            if measure > 0.25 * prev {
                rho = (rho * 10.0).min(1e12);
            }
            prev = measure;
        }
        lambda
    }

    /// Projected-gradient KKT residual in normalized coordinates, minimized
    /// over nonnegative multipliers of the active constraints.
    fn kkt_residual(&self, w: &[f64], hint: &[f64]) -> (f64, Vec<f64>) {
        let k = self.k();
        let span = self.span();
        let x = self.to_x(w);
        let mut gphi = vec![0.0; k];
        self.phi(w, &mut gphi);
        let vals = self.constraint_values(w);
        let grads: Vec<Vec<f64>> = vals
            .iter()
            .enumerate()
            .map(|(j, &(_, m, s))| {
                let mut g = vec![0.0; k];
                self.cons[j].add_gradient(self.p, w, m, s, 1.0, &mut g);
                g
            })
            .collect();
        let infeas = vals.iter().map(|v| v.0.max(0.0)).fold(0.0, f64::max);
        let active: Vec<usize> = (0..vals.len()).filter(|&j| vals[j].0 >= -1e-8).collect();
        let resid = |lam: &[f64]| -> f64 {
            let mut r = 0.0f64;
            for i in 0..k {
                let mut g = gphi[i];
                for (a, &j) in active.iter().enumerate() {
                    g += lam[a] * grads[j][i];
                }
                let step = (x[i] - span * g).clamp(0.0, 1.0);
                r = r.max((step - x[i]).abs());
            }
            for (a, &j) in active.iter().enumerate() {
                r = r.max(lam[a] * vals[j].0.abs());
            }
            r
        };
        let mut lam: Vec<f64> = active.iter().map(|&j| hint.get(j).copied().unwrap_or(0.0)).collect();
        let mut best = resid(&lam);
        let interior: Vec<usize> = (0..k).filter(|&i| x[i] > 1e-9 && x[i] < 1.0 - 1e-9).collect();
        if !active.is_empty() && interior.len() >= active.len() {
            let na = active.len();
            let mut ata = vec![vec![0.0; na + 1]; na];
            for &i in &interior {
                for a in 0..na {
                    for b in 0..na {
                        ata[a][b] += grads[active[a]][i] * grads[active[b]][i];
                    }
                    ata[a][na] -= grads[active[a]][i] * gphi[i];
                }
            }
            if let Some(sol) = solve_dense(ata) {
                let fit: Vec<f64> = sol.into_iter().map(|v| v.max(0.0)).collect();
                let r = resid(&fit);
                if r < best {
                    best = r;
                    lam = fit;
                }
            }
        }
        for _ in 0..3 {
            for a in 0..lam.len() {
                let mut candidates = vec![0.0, lam[a]];
                for e in -40..=40 {
                    candidates.push(10f64.powf(e as f64 * 0.25));
                }
                let mut trial = lam.clone();
                let mut local = (best, lam[a]);
                for &cand in &candidates {
                    trial[a] = cand;
                    let r = resid(&trial);
                    if r < local.0 {
                        local = (r, cand);
                    }
                }
                let (mut lo_b, mut hi_b) = (local.1 / 1.8, local.1 * 1.8);
                for _ in 0..60 {
                    let m1 = lo_b + (hi_b - lo_b) / 3.0;
                    let m2 = hi_b - (hi_b - lo_b) / 3.0;
                    trial[a] = m1;
                    let r1 = resid(&trial);
                    trial[a] = m2;
                    let r2 = resid(&trial);
                    if r1 < local.0 {
                        local = (r1, m1);
                    }
                    if r2 < local.0 {
                        local = (r2, m2);
                    }
                    if r1 < r2 {
                        hi_b = m2;
                    } else {
                        lo_b = m1;
                    }
                }
                lam[a] = local.1;
                best = local.0;
            }
        }
        let mut full = vec![0.0; vals.len()];
        for (a, &j) in active.iter().enumerate() {
            full[j] = lam[a];
        }
        (best.max(infeas), full)
    }

    /// Restores feasibility from `start`, then descends twice: by exact line
    /// moves alone and through the augmented Lagrangian. Returns the better
    /// objective, its point and the multiplier estimates.
    fn local_solve(&self, start: &[f64], feas_tol: f64) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let mut x = self.to_x(start);
        let mut w = vec![0.0; x.len()];
        if !self.restore_spg(&mut x, feas_tol) {
            self.to_w(&x, &mut w);
            let mut st = self.state(w.clone());
            if !self.restore_by_moves(&mut st, feas_tol) {
                return None;
            }
            x = self.to_x(&st.w);
        }
        self.to_w(&x, &mut w);
        let direct = {
            let mut st = self.state(w.clone());
            self.polish(&mut st, feas_tol)
                .then(|| (self.objective(&st), st.w, vec![0.0; self.cons.len()]))
        };
        let lambda = self.augmented_lagrangian(&mut x, None);
        self.to_w(&x, &mut w);
        let mut st = self.state(w);
        let via_al = self
            .polish(&mut st, feas_tol)
            .then(|| (self.objective(&st), st.w, lambda));
        match (direct, via_al) {
            (Some(d), Some(a)) => Some(if d.0 > a.0 { d } else { a }),
            (d, a) => a.or(d),
        }
    }

    /// Puts every fractional coordinate that the multipliers send to a bound
    /// onto it, then projects the remaining fractional coordinates back onto
    /// the active constraints by minimum-norm Newton steps.
    fn snap(&self, w: &[f64], lam: &[f64]) -> Option<Vec<f64>> {
        let k = self.k();
        let span = self.span();
        let x = self.to_x(w);
        let mut g = vec![0.0; k];
        self.phi(w, &mut g);
        let vals = self.constraint_values(w);
        for (j, &(_, m, s)) in vals.iter().enumerate() {
            self.cons[j].add_gradient(self.p, w, m, s, lam[j], &mut g);
        }
        let mut out = w.to_vec();
        let mut free = Vec::new();
        let mut snapped = false;
        for i in 0..k {
            if !self.is_interior(w[i]) {
                continue;
            }
            let step = x[i] - span * g[i];
            if step <= 0.0 {
                out[i] = self.lo;
                snapped = true;
            } else if step >= 1.0 {
                out[i] = self.hi;
                snapped = true;
            } else {
                free.push(i);
            }
        }
        if !snapped {
            return None;
        }
        let active: Vec<usize> = (0..vals.len()).filter(|&j| vals[j].0 >= -1e-6).collect();
        if active.is_empty() {
            return Some(out);
        }
        if free.len() < active.len() {
            return None;
        }
        let targets: Vec<f64> = active.iter().map(|&j| vals[j].0.min(0.0)).collect();
        for _ in 0..30 {
            let now = self.constraint_values(&out);
            let r: Vec<f64> = active.iter().zip(&targets).map(|(&j, t)| now[j].0 - t).collect();
            if r.iter().all(|v| v.abs() <= 1e-14) {
                break;
            }
            let jac: Vec<Vec<f64>> = active
                .iter()
                .map(|&j| {
                    let mut gc = vec![0.0; k];
                    self.cons[j].add_gradient(self.p, &out, now[j].1, now[j].2, 1.0, &mut gc);
                    free.iter().map(|&i| gc[i]).collect()
                })
                .collect();
            let na = active.len();
            let mut m = vec![vec![0.0; na + 1]; na];
            for a in 0..na {
                for b in 0..na {
                    m[a][b] = (0..free.len()).map(|f| jac[a][f] * jac[b][f]).sum();
                }
                m[a][na] = -r[a];
            }
            let y = solve_dense(m)?;
            for (f, &i) in free.iter().enumerate() {
                let d: f64 = (0..na).map(|a| jac[a][f] * y[a]).sum();
                out[i] = (out[i] + d).clamp(self.lo, self.hi);
            }
        }
        Some(out)
    }

    /// Moves the worst KKT-violating coordinates, alone or paired with any
    /// other coordinate along the tangent of an active constraint.
    fn kkt_repair(&self, st: &mut State, lam: &[f64]) {
        let k = self.k();
        let span = self.span();
        let x = self.to_x(&st.w);
        let mut g = vec![0.0; k];
        self.phi(&st.w, &mut g);
        let vals = self.violations(st);
        let mut grads = Vec::new();
        for (j, c) in self.cons.iter().enumerate() {
            let mut gc = vec![0.0; k];
            c.add_gradient(self.p, &st.w, st.m[j], st.s[j], 1.0, &mut gc);
            for i in 0..k {
                g[i] += lam[j] * gc[i];
            }
            if vals[j] >= -1e-6 {
                grads.push(gc);
            }
        }
        let mut worst: Vec<(f64, usize)> = (0..k)
            .map(|i| (((x[i] - span * g[i]).clamp(0.0, 1.0) - x[i]).abs(), i))
            .filter(|v| v.0 > 1e-12)
            .collect();
        worst.sort_by(|a, b| b.0.total_cmp(&a.0));
        worst.truncate(16);
        for &(_, i) in &worst {
            let dir = [(i, 1.0)];
            if let Some(t) = self.line_move(st, &dir) {
                self.apply(st, &dir, t);
            }
            for gc in &grads {
                for j in 0..k {
                    if j == i || (gc[i] == 0.0 && gc[j] == 0.0) {
                        continue;
                    }
                    let norm = gc[i].abs().max(gc[j].abs());
                    let dir = [(i, gc[j] / norm), (j, -gc[i] / norm)];
                    if let Some(t) = self.line_move(st, &dir) {
                        self.apply(st, &dir, t);
                    }
                }
            }
            if !grads.is_empty() {
                let target = if g[i] < 0.0 { self.hi } else { self.lo };
                self.arc_move(st, i, target);
            }
        }
    }

    /// Moves coordinate `i` toward `target` and re-solves one other
    /// coordinate exactly onto the feasible set, keeping the best improving
    /// combination.
    fn arc_move(&self, st: &mut State, i: usize, target: f64) {
        let gap = target - st.w[i];
        if gap.abs() <= 1e-13 * self.hi {
            return;
        }
        let mut best: Option<(f64, State)> = None;
        let current = self.objective(st);
        for frac in [1.0, 0.5, 0.1, 0.01, 1e-3] {
            let mut moved = st.clone();
            self.apply(&mut moved, &[(i, 1.0)], frac * gap);
            for j in 0..self.k() {
                if j == i {
                    continue;
                }
                let dir = [(j, 1.0)];
                let (tmin, tmax) = self.t_range(&moved, &dir);
                let qs = self.quads(&moved, &dir);
                for t in self.breakpoints(&moved, &qs, tmin, tmax) {
                    if !self.violations_at(&moved, &qs, t).all(|v| v <= LINE_TOL) {
                        continue;
                    }
                    let num = moved.num + t * self.a[j];
                    let den = moved.den + t * self.c[j];
                    let obj = self.orient * num / den;
                    if obj > current && best.as_ref().is_none_or(|b| obj > b.0) {
                        let mut cand = moved.clone();
                        self.apply(&mut cand, &dir, t);
                        best = Some((obj, cand));
                    }
                }
            }
        }
        if let Some((_, cand)) = best {
            *st = self.state(cand.w);
        }
    }
}

fn quadratic_roots(q2: f64, q1: f64, q0: f64, span: f64) -> Vec<f64> {
    let lin_scale = q1.abs() * span + q0.abs();
    if q2 == 0.0 || q2.abs() * span * span <= 1e-15 * lin_scale {
        return if q1 != 0.0 { vec![-q0 / q1] } else { vec![] };
    }
    let disc = q1 * q1 - 4.0 * q2 * q0;
    if disc < 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    let qq = -0.5 * (q1 + q1.signum() * sq);
    let mut out = Vec::with_capacity(2);
    if qq != 0.0 {
        out.push(qq / q2);
        out.push(q0 / qq);
    } else {
        out.push(0.0);
    }
    out
}

/// Spectral projected gradient on `[0, 1]^K` with a nonmonotone line search.
/// Returns the final projected-gradient infinity norm.
fn spg<F>(f: &F, x: &mut Vec<f64>, tol: f64, max_iter: usize, target: Option<f64>) -> f64
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let k = x.len();
    let mut g = vec![0.0; k];
    let mut fx = f(x, &mut g);
    let mut history = vec![fx; 10];
    let mut sigma = 1.0;
    let mut trial = vec![0.0; k];
    let mut gt = vec![0.0; k];
    let pg_norm = |x: &[f64], g: &[f64]| -> f64 {
        (0..x.len())
            .map(|i| ((x[i] - g[i]).clamp(0.0, 1.0) - x[i]).abs())
            .fold(0.0, f64::max)
    };
    for it in 0..max_iter {
        let pg = pg_norm(x, &g);
        if pg <= tol || target.is_some_and(|t| fx <= t) {
            return pg;
        }
        let d: Vec<f64> = (0..k).map(|i| (x[i] - sigma * g[i]).clamp(0.0, 1.0) - x[i]).collect();
        let gd: f64 = (0..k).map(|i| g[i] * d[i]).sum();
        let fmax = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut step = 1.0;
        let mut ft;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..k {
                trial[i] = (x[i] + step * d[i]).clamp(0.0, 1.0);
            }
            ft = f(&trial, &mut gt);
            if ft <= fmax + 1e-4 * step * gd {
                accepted = true;
                let mut ss = 0.0;
                let mut sy = 0.0;
                for i in 0..k {
                    let s = trial[i] - x[i];
                    let y = gt[i] - g[i];
                    ss += s * s;
                    sy += s * y;
                }
                sigma = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { 1e10 };
                std::mem::swap(x, &mut trial);
                std::mem::swap(&mut g, &mut gt);
                fx = ft;
                history[it % 10] = fx;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return pg_norm(x, &g);
        }
    }
    pg_norm(x, &g)
}

struct Endpoint {
    value: f64,
    w: Vec<f64>,
    kkt: f64,
    restarts: usize,
    unconstrained: bool,
}

/// Frontier starts: walk the hyperplane `m_j(w) = t` from the unconstrained
/// optimum toward `m_j = 0`, keeping the equality-constrained optimum, and
/// bisect to the first point satisfying constraint `j`.
fn frontier_start(
    table: &SupportTable,
    bx: &WeightBox,
    c: &RelaxedConstraint,
    w_u: &[f64],
    dir: Direction,
) -> Option<Vec<f64>> {
    let p = table.phat();
    let u: Vec<f64> = (0..p.len()).map(|k| p[k] * c.e[k]).collect();
    let offset: f64 = (0..p.len()).map(|k| p[k] * c.o[k]).sum();
    let smax: f64 = u.iter().map(|&x| x * if x > 0.0 { bx.hi() } else { bx.lo() }).sum();
    let smin: f64 = u.iter().map(|&x| x * if x > 0.0 { bx.lo() } else { bx.hi() }).sum();
    let tau_u: f64 = (0..p.len()).map(|k| u[k] * w_u[k]).sum();
    let tau_0 = (-offset).clamp(smin, smax);
    let at = |tau: f64| -> Option<Vec<f64>> {
        lfp::solve_with_equality(table, bx, &u, tau.clamp(smin, smax), dir)
            .ok()
            .map(|(_, w)| w)
    };
    let ok = |w: &[f64]| c.value(p, w) <= 0.0;
    let steps = 16;
    let mut prev = tau_u;
    for i in 1..=steps {
        let tau = tau_u + (tau_0 - tau_u) * i as f64 / steps as f64;
        let w = at(tau)?;
        if ok(&w) {
            let (mut bad, mut good, mut best) = (prev, tau, w);
            for _ in 0..30 {
                let mid = 0.5 * (bad + good);
                match at(mid) {
                    Some(wm) if ok(&wm) => {
                        good = mid;
                        best = wm;
                    }
                    _ => bad = mid,
                }
            }
            return Some(best);
        }
        prev = tau;
    }
    at(tau_0)
}

fn solve_endpoint(
    table: &SupportTable,
    bx: &WeightBox,
    cons: &[RelaxedConstraint],
    dir: Direction,
    w_u: &[f64],
    w_other: &[f64],
    scale_r: f64,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<Endpoint> {
    let eng = Engine::new(table, cons, bx, dir, scale_r);
    let unconstrained = eng.state(w_u.to_vec());
    if eng.max_violation(&unconstrained) <= opts.feas_tol {
        return Ok(Endpoint {
            value: eng.objective(&unconstrained) * eng.orient,
            w: w_u.to_vec(),
            kkt: 0.0,
            restarts: 0,
            unconstrained: true,
        });
    }
    if bx.is_degenerate() {
        return Err(Error::InfeasibleConstraints);
    }
    let mut starts: Vec<Vec<f64>> = vec![w_u.to_vec(), w_other.to_vec()];
    for c in cons {
        if let Some(w) = frontier_start(table, bx, c, w_u, dir) {
            starts.push(w);
        }
    }
    let center = cons
        .iter()
        .find(|c| c.label.starts_with("response_rate"))
        .map(|c| -c.o[0])
        .unwrap_or_else(|| bx.midpoint());
    starts.push(vec![center; table.k()]);
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }
    let dir_index = if dir == Direction::Max { 1 } else { 0 };
    let mut idx = 0u64;
    while starts.len() < opts.multistarts.max(starts.len()) {
        let mut rng = substream(opts.seed, domain::MULTISTART, (dir_index << 32) | idx);
        starts.push((0..table.k()).map(|_| rng.random_range(bx.lo()..=bx.hi())).collect());
        idx += 1;
    }
    let run = |starts: &[Vec<f64>]| -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let results = opts.exec.map(starts.len(), |i| eng.local_solve(&starts[i], opts.feas_tol));
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for r in results.into_iter().flatten() {
            let better = match &best {
                None => true,
                Some(b) => r.0 > b.0 + 1e-13 * b.0.abs().max(1.0),
            };
            if better {
                best = Some(r);
            }
        }
        best
    };
    let mut restarts = starts.len();
    let mut best = run(&starts).ok_or(Error::InfeasibleConstraints)?;
    // Basin hopping: push each fractional coordinate of the incumbent to
    // either bound and descend again.
    for _ in 0..3 {
        let hops: Vec<Vec<f64>> = (0..table.k())
            .filter(|&i| eng.is_interior(best.1[i]))
            .take(8)
            .flat_map(|i| {
                [bx.lo(), bx.hi()].map(|v| {
                    let mut w = best.1.clone();
                    w[i] = v;
                    w
                })
            })
            .collect();
        if hops.is_empty() {
            break;
        }
        restarts += hops.len();
        match run(&hops) {
            Some(r) if r.0 > best.0 + 1e-12 * best.0.abs().max(1.0) => best = r,
            _ => break,
        }
    }
    let (mut obj, mut w, lambda) = best;
    let (mut kkt, mut lam) = eng.kkt_residual(&w, &lambda);
    for _ in 0..20 {
        if kkt <= opts.kkt_tol {
            break;
        }
        let mut accepted = None;
        for method in 0..3 {
            let cand = match method {
                0 => {
                    let mut st = eng.state(w.clone());
                    eng.kkt_repair(&mut st, &lam);
                    Some(st.w)
                }
                1 => eng.snap(&w, &lam),
                _ => {
                    let mut x = eng.to_x(&w);
                    eng.augmented_lagrangian(&mut x, Some(&lam));
                    let mut wx = vec![0.0; x.len()];
                    eng.to_w(&x, &mut wx);
                    Some(wx)
                }
            };
            let Some(cand) = cand else { continue };
            let mut st = eng.state(cand);
            if !eng.polish(&mut st, opts.feas_tol) {
                continue;
            }
            let cobj = eng.objective(&st);
            let scale = obj.abs().max(1.0);
            if cobj > obj + 1e-13 * scale {
                accepted = Some(st.w);
            } else if cobj >= obj - 1e-12 * scale && eng.kkt_residual(&st.w, &lam).0 < 0.5 * kkt {
                accepted = Some(st.w);
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some(next) = accepted else { break };
        obj = eng.objective(&eng.state(next.clone()));
        w = next;
        (kkt, lam) = eng.kkt_residual(&w, &lam);
    }
    if kkt > opts.max_kkt_residual {
        return Err(Error::NonConvergence { residual: kkt });
    }
    Ok(Endpoint {
        value: obj * eng.orient,
        w,
        kkt,
        restarts,
        unconstrained: false,
    })
}

/// Interval of the weighted ratio over the box intersected with the relaxed
/// constraints. The shares of `constraints` must sum to `alpha1`.
pub fn solve_constrained_bounds(
    table: &SupportTable,
    bx: &WeightBox,
    constraints: &[AuxConstraint],
    alpha1: f64,
    alpha2: f64,
    opts: &SolverOptions,
) -> Result<ConstrainedInterval> {
    check_alpha(alpha2)?;
    let share_total: f64 = constraints.iter().map(|c| c.alpha_share).sum();
    if !constraints.is_empty() && (share_total - alpha1).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "constraint shares sum to {share_total}, expected alpha1 = {alpha1}"
        )));
    }
    let relaxed = constraints
        .iter()
        .map(|c| build_relaxed_constraint(c, table, bx, table.n()))
        .collect::<Result<Vec<_>>>()?;
    solve_relaxed(table, bx, &relaxed, alpha1, alpha2, opts)
}

/// As [`solve_constrained_bounds`] for already relaxed constraints.
pub fn solve_relaxed(
    table: &SupportTable,
    bx: &WeightBox,
    relaxed: &[RelaxedConstraint],
    alpha1: f64,
    alpha2: f64,
    opts: &SolverOptions,
) -> Result<ConstrainedInterval> {
    solve_relaxed_from(table, bx, relaxed, alpha1, alpha2, None, opts)
}

/// `warm` holds extra starting weights for the lower and upper endpoints.
fn solve_relaxed_from(
    table: &SupportTable,
    bx: &WeightBox,
    relaxed: &[RelaxedConstraint],
    alpha1: f64,
    alpha2: f64,
    warm: Option<(&[f64], &[f64])>,
    opts: &SolverOptions,
) -> Result<ConstrainedInterval> {
    let ie = lfp::solve_bounds(table, bx)?;
    let scale_r = if ie.width() > 0.0 { ie.width() } else { 1.0 };
    let (warm_lo, warm_hi) = warm.unzip();
    let hi = solve_endpoint(table, bx, relaxed, Direction::Max, &ie.w_hi, &ie.w_lo, scale_r, warm_hi, opts)?;
    let lo = solve_endpoint(table, bx, relaxed, Direction::Min, &ie.w_lo, &ie.w_hi, scale_r, warm_lo, opts)?;
    let p = table.phat();
    let slacks = relaxed
        .iter()
        .map(|c| (-c.value(p, &lo.w)).min(-c.value(p, &hi.w)))
        .collect();
    let kkt = lo.kkt.max(hi.kkt);
    let beta_lo = evaluate(table, &lo.w).unwrap_or(lo.value);
    let beta_hi = evaluate(table, &hi.w).unwrap_or(hi.value);
    Ok(ConstrainedInterval {
        beta_lo: beta_lo.max(ie.beta_lo),
        beta_hi: beta_hi.min(ie.beta_hi),
        w_lo: lo.w,
        w_hi: hi.w,
        alpha1,
        alpha2,
        diagnostics: SolverDiagnostics {
            restarts: lo.restarts + hi.restarts,
            best_kkt_residual: kkt,
            kkt_target_met: kkt <= opts.kkt_tol,
            feasibility_slacks: slacks,
            unconstrained_optimal: (lo.unconstrained, hi.unconstrained),
        },
    })
}

/// Confidence interval at level `alpha2` around the constrained endpoints,
/// with total asymptotic coverage at least `1 - alpha1 - alpha2`.
pub fn theorem3_ci(table: &SupportTable, ci: &ConstrainedInterval) -> Result<AsymptoticCI> {
    if !(ci.alpha1 >= 0.0 && ci.alpha2 > 0.0 && ci.alpha1 + ci.alpha2 < 1.0) {
        return Err(Error::InvalidAlpha(ci.alpha1 + ci.alpha2));
    }
    let sqrt_n = (table.n() as f64).sqrt();
    let se_lo = sigma2_hat(table, &ci.w_lo, ci.beta_lo)?.sqrt() / sqrt_n;
    let se_hi = sigma2_hat(table, &ci.w_hi, ci.beta_hi)?.sqrt() / sqrt_n;
    ci_from_parts(ci.beta_lo, ci.beta_hi, se_lo, se_hi, table.n(), ci.alpha2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub alpha1: f64,
    pub alpha2: f64,
    pub interval: (f64, f64),
    pub ci: AsymptoticCI,
}

impl SplitResult {
    pub fn width(&self) -> f64 {
        self.ci.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTuning {
    /// Index into `results` of the narrowest interval (first on ties).
    pub best: usize,
    pub results: Vec<SplitResult>,
}

/// Evaluates the constrained confidence interval at each `(alpha1, alpha2)`
/// split and picks the narrowest. Constraint shares are read as relative.
pub fn tune_alpha_split(
    table: &SupportTable,
    bx: &WeightBox,
    constraints: &[AuxConstraint],
    total_alpha: f64,
    grid: &[(f64, f64)],
    opts: &SolverOptions,
) -> Result<SplitTuning> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty split grid".into()));
    }
    for &(a1, a2) in grid {
        if (a1 + a2 - total_alpha).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ({a1}, {a2}) does not sum to {total_alpha}"
            )));
        }
    }
    // Larger alpha1 means tighter constraints, so sweeping alpha1 downward
    // lets each solve start from the previous, still feasible, endpoints.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| grid[j].0.total_cmp(&grid[i].0).then(i.cmp(&j)));
    let mut slots: Vec<Option<SplitResult>> = vec![None; grid.len()];
    let mut prev: Option<ConstrainedInterval> = None;
    for i in order {
        let (a1, a2) = grid[i];
        let cons = allocate_shares(constraints, a1)?;
        let relaxed = cons
            .iter()
            .map(|c| build_relaxed_constraint(c, table, bx, table.n()))
            .collect::<Result<Vec<_>>>()?;
        let warm = prev.as_ref().map(|p| (p.w_lo.as_slice(), p.w_hi.as_slice()));
        let ci = solve_relaxed_from(table, bx, &relaxed, a1, a2, warm, opts)?;
        let t3 = theorem3_ci(table, &ci)?;
        slots[i] = Some(SplitResult {
            alpha1: a1,
            alpha2: a2,
            interval: (ci.beta_lo, ci.beta_hi),
            ci: t3,
        });
        prev = Some(ci);
    }
    let results: Vec<SplitResult> = slots.into_iter().map(|r| r.expect("every split solved")).collect();
    let mut best = 0;
    for i in 1..results.len() {
        if results[i].width() < results[best].width() {
            best = i;
        }
    }
    Ok(SplitTuning { best, results })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = m.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))?;
        if m[piv][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for j in c..=n {
                m[r][j] -= f * m[c][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let tail: f64 = (c + 1..n).map(|j| m[c][j] * x[j]).sum();
        x[c] = (m[c][n] - tail) / m[c][c];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimand::{Estimand, ObservationSet};
    use crate::support::collapse_support;
    use proptest::prelude::*;
    use rand::Rng;

    fn cov_table(rows: &[(f64, f64)]) -> SupportTable {
        let obs = ObservationSet::from_rows(
            vec!["q".into(), "y".into()],
            &rows.iter().map(|&(q, y)| vec![q, y]).collect::<Vec<_>>(),
        )
        .unwrap();
        collapse_support(&obs, &Estimand::mean(1)).unwrap()
    }

    fn sample_rows(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = substream(seed, 0, 0);
        (0..n)
            .map(|_| {
                let q = rng.random_range(0..5) as f64 - 2.0;
                let e = rng.random_range(0..3) as f64 - 1.0;
                (q, q + e)
            })
            .collect()
    }

    #[test]
    fn level_conventions() {
        assert!((LevelConvention::Coverage.significance(0.98).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(LevelConvention::Significance.significance(0.03).unwrap(), 0.03);
        assert!(LevelConvention::Coverage.significance(1.0).is_err());
    }

    #[test]
    fn response_rate_is_tight_at_its_center() {
        let t = cov_table(&sample_rows(50, 1));
        let bx = WeightBox::new(0.1, 1.0).unwrap();
        let c = build_relaxed_constraint(&AuxConstraint::response_rate(0.4, 0.05), &t, &bx, 50).unwrap();
        let (lhs, rhs) = c.sides(t.phat(), &vec![2.5; t.k()]);
        assert!(lhs.abs() < 1e-15 && rhs.abs() < 1e-15);
        assert!(c.is_satisfied(t.phat(), &vec![2.5; t.k()], 0.0));
    }

    #[test]
    fn response_rate_outside_box_is_rejected() {
        let t = cov_table(&sample_rows(20, 2));
        let bx = WeightBox::new(0.5, 1.0).unwrap();
        let r = build_relaxed_constraint(&AuxConstraint::response_rate(0.2, 0.05), &t, &bx, 20);
        assert!(matches!(r, Err(Error::InfeasibleByConstruction(_))));
    }

    #[test]
    fn uninformative_covariate_is_always_feasible() {
        let rows: Vec<(f64, f64)> = (0..20).map(|i| (1.5, i as f64)).collect();
        let t = cov_table(&rows);
        let bx = WeightBox::new(0.2, 1.0).unwrap();
        let c = build_relaxed_constraint(&AuxConstraint::covariate_mean(0, 1.5, 0.05), &t, &bx, 20).unwrap();
        let (lhs, rhs) = c.sides(t.phat(), &vec![3.0; t.k()]);
        assert_eq!((lhs, rhs), (0.0, 0.0));
    }

    #[test]
    fn relaxation_vanishes_for_large_n() {
        let t = cov_table(&sample_rows(40, 3));
        let bx = WeightBox::new(0.1, 1.0).unwrap();
        let c = build_relaxed_constraint(&AuxConstraint::response_rate(0.5, 0.05), &t, &bx, 1 << 40).unwrap();
        assert!(c.c < 1e-5);
        let w: Vec<f64> = (0..t.k()).map(|k| if k % 2 == 0 { 2.1 } else { 1.9 }).collect();
        let (m, _) = c.moments(t.phat(), &w);
        assert_eq!(c.is_satisfied(t.phat(), &w, 0.0), m.abs() < 1e-4);
    }

    #[test]
    fn empty_constraint_list_reproduces_lfp() {
        let t = cov_table(&sample_rows(60, 4));
        let bx = WeightBox::new(0.25, 1.0).unwrap();
        let ci = solve_constrained_bounds(&t, &bx, &[], 0.0, 0.05, &SolverOptions::default()).unwrap();
        let ie = lfp::solve_bounds(&t, &bx).unwrap();
        assert!((ci.beta_lo - ie.beta_lo).abs() < 1e-6 && (ci.beta_hi - ie.beta_hi).abs() < 1e-6);
    }

    #[test]
    fn covariate_constraint_tightens_and_is_satisfied() {
        let t = cov_table(&sample_rows(400, 5));
        let bx = WeightBox::new(0.2, 1.0).unwrap();
        let cons = [AuxConstraint::covariate_mean(0, 0.3, 0.05)];
        let ci = solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &SolverOptions::default()).unwrap();
        let ie = lfp::solve_bounds(&t, &bx).unwrap();
        assert!(ci.beta_lo >= ie.beta_lo - 1e-9 && ci.beta_hi <= ie.beta_hi + 1e-9);
        assert!(ci.width() < ie.width());
        let rc = build_relaxed_constraint(&cons[0], &t, &bx, t.n()).unwrap();
        assert!(rc.value(t.phat(), &ci.w_lo) <= 1e-8);
        assert!(rc.value(t.phat(), &ci.w_hi) <= 1e-8);
        assert!(bx.contains(&ci.w_lo, 0.0) && bx.contains(&ci.w_hi, 0.0));
        let t3 = theorem3_ci(&t, &ci).unwrap();
        assert!(t3.c_lo <= ci.beta_lo && t3.c_hi >= ci.beta_hi);
    }

    #[test]
    fn deterministic_across_strategies() {
        let t = cov_table(&sample_rows(200, 6));
        let bx = WeightBox::new(0.2, 1.0).unwrap();
        let cons = [AuxConstraint::covariate_mean(0, 0.3, 0.05)];
        let mut opts = SolverOptions { exec: Exec::Sequential, ..Default::default() };
        let a = solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &opts).unwrap();
        opts.exec = Exec::Parallel;
        let b = solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn response_and_generic_constraints_solve() {
        let t = cov_table(&sample_rows(300, 7));
        let bx = WeightBox::new(0.2, 1.0).unwrap();
        let cons = [
            AuxConstraint::response_rate(0.5, 0.02),
            AuxConstraint::generic(|row: &[f64]| row[0] - 0.5, 0.02),
        ];
        let ci = solve_constrained_bounds(&t, &bx, &cons, 0.04, 0.05, &SolverOptions::default()).unwrap();
        let ie = lfp::solve_bounds(&t, &bx).unwrap();
        assert!(ci.beta_lo >= ie.beta_lo - 1e-9 && ci.beta_hi <= ie.beta_hi + 1e-9);
        assert!(ci.diagnostics.feasibility_slacks.iter().all(|&s| s >= -1e-8));
    }

    #[test]
    fn infeasible_constraints_are_reported() {
        let rows: Vec<(f64, f64)> = (0..30).map(|i| (1.0 + (i % 3) as f64, i as f64)).collect();
        let t = cov_table(&rows);
        let bx = WeightBox::new(0.5, 1.0).unwrap();
        // Every q exceeds qbar, so the weighted mean cannot match it.
        let cons = [AuxConstraint::covariate_mean(0, -5.0, 0.05)];
        let r = solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &SolverOptions::default());
        assert_eq!(r.unwrap_err(), Error::InfeasibleConstraints);
    }

    #[test]
    fn shares_must_match_alpha1() {
        let t = cov_table(&sample_rows(30, 8));
        let bx = WeightBox::new(0.5, 1.0).unwrap();
        let cons = [AuxConstraint::covariate_mean(0, 0.0, 0.01)];
        assert!(solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &SolverOptions::default()).is_err());
    }

    #[test]
    fn vacuous_relaxation_recovers_unconstrained_ci() {
        let t = cov_table(&sample_rows(100, 9));
        let bx = WeightBox::new(0.3, 1.0).unwrap();
        let cons = [AuxConstraint::covariate_mean(0, 0.2, 1e-300)];
        let ci = solve_constrained_bounds(&t, &bx, &cons, 1e-300, 0.05, &SolverOptions::default()).unwrap();
        let t3 = theorem3_ci(&t, &ci).unwrap();
        let ie = lfp::solve_bounds(&t, &bx).unwrap();
        let un = crate::inference::confidence_interval(&ie, &t, 0.05).unwrap();
        assert!((t3.c_lo - un.c_lo).abs() < 1e-9 && (t3.c_hi - un.c_hi).abs() < 1e-9);
    }

    #[test]
    fn tuning_picks_first_of_equal_splits() {
        let t = cov_table(&sample_rows(200, 10));
        let bx = WeightBox::new(0.2, 1.0).unwrap();
        let cons = [AuxConstraint::covariate_mean(0, 0.3, 1.0)];
        let opts = SolverOptions { multistarts: 4, ..Default::default() };
        let one = tune_alpha_split(&t, &bx, &cons, 0.05, &[(0.02, 0.03)], &opts).unwrap();
        assert_eq!(one.best, 0);
        let two = tune_alpha_split(&t, &bx, &cons, 0.05, &[(0.02, 0.03), (0.02, 0.03)], &opts).unwrap();
        assert_eq!(two.best, 0);
        assert!(tune_alpha_split(&t, &bx, &cons, 0.05, &[(0.02, 0.02)], &opts).is_err());
    }

    #[test]
    fn quadratic_roots_are_accurate() {
        let r = quadratic_roots(1.0, -3.0, 2.0, 10.0);
        let mut r = r;
        r.sort_by(f64::total_cmp);
        assert!((r[0] - 1.0).abs() < 1e-15 && (r[1] - 2.0).abs() < 1e-15);
        assert_eq!(quadratic_roots(0.0, 2.0, -4.0, 10.0), vec![2.0]);
        assert!(quadratic_roots(1.0, 0.0, 1.0, 10.0).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn adding_a_constraint_never_widens(seed in 0u64..1000, qbar in -0.5f64..0.5) {
            let t = cov_table(&sample_rows(80, seed));
            let bx = WeightBox::new(0.25, 1.0).unwrap();
            let ie = lfp::solve_bounds(&t, &bx).unwrap();
            let opts = SolverOptions { multistarts: 6, ..Default::default() };
            let cons = [AuxConstraint::covariate_mean(0, qbar, 0.05)];
            if let Ok(ci) = solve_constrained_bounds(&t, &bx, &cons, 0.05, 0.05, &opts) {
                prop_assert!(ci.beta_lo >= ie.beta_lo - 1e-6);
                prop_assert!(ci.beta_hi <= ie.beta_hi + 1e-6);
                prop_assert!(ci.beta_lo <= ci.beta_hi + 1e-9);
            }
        }
    }
}
