//! Bounds under a parametric selection model.
//!
//! Inverse selection probabilities are restricted to `h(alpha_0 + alpha_1' D)`
//! for observed selection covariates `D`. Keeping every row's weight inside
//! `[1/b, 1/a]` gives the linear system
//! `h^{-1}(1/b) <= alpha_0 + alpha_1' D_i <= h^{-1}(1/a)`, and the ratio
//! estimand is optimized over that polytope with a log-barrier quasi-Newton
//! method from many interior starts.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{Estimand, ObservationSet};
use crate::exec::Exec;
use crate::lfp::{self, Direction};
use crate::rng::{domain, substream};
use crate::support::{SupportTable, WeightBox};

/// Linear index floor used in place of `h^{-1}(1) = -inf` when `b = 1`.
pub const VACUOUS_FLOOR: f64 = -30.0;

const WORKING_SPAN: f64 = 6.0;
const MU_START: f64 = 1e-4;
/// Bound on every coefficient, keeping the polytope compact.
pub const COEF_CAP: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// `h(u) = 1 + exp(u)`.
    #[default]
    Logit,
}

impl Link {
    pub fn h(self, u: f64) -> f64 {
        match self {
            Link::Logit => 1.0 + u.exp(),
        }
    }

    pub fn dh(self, u: f64) -> f64 {
        match self {
            Link::Logit => u.exp(),
        }
    }

    /// Inverse link; `None` where it is unbounded.
    pub fn inverse(self, w: f64) -> Option<f64> {
        match self {
            Link::Logit => (w > 1.0).then(|| (w - 1.0).ln()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConstraint {
    #[default]
    Free,
    NonNegative,
    NonPositive,
    /// Both non-negative and non-positive.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFamily {
    pub link: Link,
    pub selection_columns: Vec<String>,
    /// One entry per selection column; the intercept is always free.
    pub sign_constraints: Vec<SignConstraint>,
}

impl ParametricFamily {
    pub fn logit(selection_columns: Vec<String>) -> Self {
        let d = selection_columns.len();
        Self {
            link: Link::Logit,
            selection_columns,
            sign_constraints: vec![SignConstraint::Free; d],
        }
    }

    pub fn with_signs(mut self, signs: Vec<SignConstraint>) -> Self {
        self.sign_constraints = signs;
        self
    }

    pub fn d(&self) -> usize {
        self.selection_columns.len()
    }
}

/// Half-spaces `rows[j] . alpha <= rhs[j]` in dimension `d + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPolytope {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    /// Bounds `(lower, upper)` on every linear index.
    pub index_bounds: (f64, f64),
}

impl AlphaPolytope {
    pub fn slacks(&self, alpha: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| b - dot(r, alpha))
            .collect()
    }

    pub fn contains(&self, alpha: &[f64], tol: f64) -> bool {
        self.slacks(alpha).iter().all(|&s| s >= -tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricDiagnostics {
    pub restarts: usize,
    /// Constraints within `1e-6` of binding at `(alpha_lo, alpha_hi)`.
    pub active_constraints: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricInterval {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub alpha_lo: Vec<f64>,
    pub alpha_hi: Vec<f64>,
    pub diagnostics: ParametricDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricOptions {
    pub multistarts: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for ParametricOptions {
    fn default() -> Self {
        Self {
            multistarts: 32,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn selection_matrix(obs: &ObservationSet, family: &ParametricFamily) -> Result<Vec<Vec<f64>>> {
    if family.sign_constraints.len() != family.d() {
        return Err(Error::LengthMismatch {
            expected: family.d(),
            got: family.sign_constraints.len(),
        });
    }
    let cols = family
        .selection_columns
        .iter()
        .map(|c| obs.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(obs
        .rows()
        .map(|row| std::iter::once(1.0).chain(cols.iter().map(|&c| row[c])).collect())
        .collect())
}

fn index_bounds(bx: &WeightBox, link: Link) -> Result<(f64, f64)> {
    let upper = link.inverse(bx.hi()).ok_or(Error::BoundaryLinkError(bx.hi()))?;
    let lower = link.inverse(bx.lo()).unwrap_or(VACUOUS_FLOOR).min(upper);
    Ok((lower, upper))
}

fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Linear inequality system on `alpha = (alpha_0, alpha_1)` implied by the box,
/// the sign constraints and the coefficient cap. Duplicate half-spaces are
/// removed.
pub fn feasible_alpha_polytope(
    obs: &ObservationSet,
    bx: &WeightBox,
    family: &ParametricFamily,
) -> Result<AlphaPolytope> {
    let dmat = selection_matrix(obs, family)?;
    let (lower, upper) = index_bounds(bx, family.link)?;
    Ok(polytope(&dmat, lower, upper, family))
}

fn polytope(dmat: &[Vec<f64>], lower: f64, upper: f64, family: &ParametricFamily) -> AlphaPolytope {
    let dim = family.d() + 1;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut push = |r: Vec<f64>, b: f64| {
        let mut k = key(&r);
        k.push((b + 0.0).to_bits());
        if seen.insert(k) {
            rows.push(r);
            rhs.push(b);
        }
    };
    for d in dmat {
        push(d.clone(), upper);
        push(d.iter().map(|x| -x).collect(), -lower);
    }
    let unit = |j: usize, s: f64| -> Vec<f64> {
        let mut r = vec![0.0; dim];
        r[j] = s;
        r
    };
    for (j, sc) in family.sign_constraints.iter().enumerate() {
        match sc {
            SignConstraint::Free => {}
            SignConstraint::NonNegative => push(unit(j + 1, -1.0), 0.0),
            SignConstraint::NonPositive => push(unit(j + 1, 1.0), 0.0),
            SignConstraint::Zero => {
                push(unit(j + 1, -1.0), 0.0);
                push(unit(j + 1, 1.0), 0.0);
            }
        }
    }
    for j in 0..dim {
        push(unit(j, 1.0), COEF_CAP);
        push(unit(j, -1.0), COEF_CAP);
    }
    AlphaPolytope {
        dim,
        rows,
        rhs,
        index_bounds: (lower, upper),
    }
}

/// Solves `m x = v` by Gaussian elimination with partial pivoting.
fn solve_dense(mut m: Vec<Vec<f64>>, mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                v[r] -= f * v[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (v[r] - s) / m[r][r];
    }
    Some(x)
}

/// Polytope restricted to the free coordinates.
struct Reduced {
    free: Vec<usize>,
    dim_full: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl Reduced {
    fn new(poly: &AlphaPolytope, family: &ParametricFamily) -> Result<Self> {
        let free: Vec<usize> = (0..poly.dim)
            .filter(|&j| j == 0 || family.sign_constraints[j - 1] != SignConstraint::Zero)
            .collect();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut seen = HashSet::new();
        for (r, &b) in poly.rows.iter().zip(&poly.rhs) {
            let red: Vec<f64> = free.iter().map(|&j| r[j]).collect();
            if red.iter().all(|&x| x == 0.0) {
                if b < 0.0 {
                    return Err(Error::InfeasiblePolytope);
                }
                continue;
            }
            let mut k = key(&red);
            k.push((b + 0.0).to_bits());
            if seen.insert(k) {
                rows.push(red);
                rhs.push(b);
            }
        }
        Ok(Self {
            free,
            dim_full: poly.dim,
            rows,
            rhs,
        })
    }

    fn dim(&self) -> usize {
        self.free.len()
    }

    fn embed(&self, z: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.dim_full];
        for (i, &j) in self.free.iter().enumerate() {
            a[j] = z[i];
        }
        a
    }

    fn min_slack(&self, z: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| b - dot(r, z))
            .fold(f64::INFINITY, f64::min)
    }

    /// Strictly interior point by a phase-one barrier on `max_j (A z - b)_j`.
    fn interior_point(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut z = vec![0.0; n];
        let mut s = -self.min_slack(&z) + 1.0;
        let mut t = 1.0;
        for _ in 0..60 {
            // Minimize t s - sum log(s - (A z - b)) - log(s + 1) by Newton.
            for _ in 0..50 {
                let mut grad = vec![0.0; n + 1];
                let mut hess = vec![vec![0.0; n + 1]; n + 1];
                grad[n] = t;
                for (r, &b) in self.rows.iter().zip(&self.rhs) {
                    let sl = s - (dot(r, &z) - b);
                    let inv = 1.0 / sl;
                    let mut a = r.clone();
                    a.push(-1.0);
                    for i in 0..=n {
                        grad[i] += a[i] * inv;
                        for j in 0..=n {
                            hess[i][j] += a[i] * a[j] * inv * inv;
                        }
                    }
                }
                let cap = 1.0 / (s + 1.0);
                grad[n] -= cap;
                hess[n][n] += cap * cap;
                let step = match solve_dense(hess, grad.iter().map(|g| -g).collect()) {
                    Some(x) => x,
                    None => break,
                };
                let dec: f64 = -dot(&step, &grad);
                let mut lam = 1.0;
                loop {
                    let zn: Vec<f64> = (0..n).map(|i| z[i] + lam * step[i]).collect();
                    let sn = s + lam * step[n];
                    let ok = sn > -1.0 && self.rows.iter().zip(&self.rhs).all(|(r, b)| sn - (dot(r, &zn) - b) > 0.0);
                    if ok {
                        z = zn;
                        s = sn;
                        break;
                    }
                    lam *= 0.5;
                    if lam < 1e-12 {
                        break;
                    }
                }
                if self.min_slack(&z) > 1e-9 {
                    return Ok(z);
                }
                if dec < 1e-12 {
                    break;
                }
            }
            if self.min_slack(&z) > 1e-9 {
                return Ok(z);
            }
            if s > -1e-13 && t > 1e10 {
                break;
            }
            t *= 10.0;
        }
        if self.min_slack(&z) > 0.0 {
            Ok(z)
        } else {
            Err(Error::InfeasiblePolytope)
        }
    }

    /// Analytic center by damped Newton on `-sum log(b - A z)`.
    fn analytic_center(&self, mut z: Vec<f64>) -> Vec<f64> {
        let n = self.dim();
        for _ in 0..100 {
            let mut grad = vec![0.0; n];
            let mut hess = vec![vec![0.0; n]; n];
            for (r, &b) in self.rows.iter().zip(&self.rhs) {
                let inv = 1.0 / (b - dot(r, &z));
                for i in 0..n {
                    grad[i] += r[i] * inv;
                    for j in 0..n {
                        hess[i][j] += r[i] * r[j] * inv * inv;
                    }
                }
            }
            let Some(step) = solve_dense(hess, grad.iter().map(|g| -g).collect()) else {
                break;
            };
            let dec = -dot(&step, &grad);
            let mut lam = 1.0 / (1.0 + dec.max(0.0).sqrt());
            loop {
                let zn: Vec<f64> = (0..n).map(|i| z[i] + lam * step[i]).collect();
                if self.min_slack(&zn) > 0.0 {
                    z = zn;
                    break;
                }
                lam *= 0.5;
                if lam < 1e-14 {
                    return z;
                }
            }
            if dec < 1e-14 {
                break;
            }
        }
        z
    }

    /// Largest step from `z` along `u` staying inside.
    fn max_step(&self, z: &[f64], u: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for (r, &b) in self.rows.iter().zip(&self.rhs) {
            let rate = dot(r, u);
            if rate > 0.0 {
                best = best.min((b - dot(r, z)) / rate);
            }
        }
        best
    }
}

/// Rows collapsed on `(D, f, g)` with multiplicities.
struct RowData {
    d: Vec<Vec<f64>>,
    f: Vec<f64>,
    g: Vec<f64>,
    count: Vec<f64>,
}

impl RowData {
    fn new(dmat: Vec<Vec<f64>>, obs: &ObservationSet, est: &Estimand) -> Result<Self> {
        let mut index = std::collections::HashMap::new();
        let mut out = RowData {
            d: Vec::new(),
            f: Vec::new(),
            g: Vec::new(),
            count: Vec::new(),
        };
        for (i, (row, d)) in obs.rows().zip(dmat).enumerate() {
            let (f, g) = est.eval_row(row, i)?;
            let mut k = key(&d);
            k.push((f + 0.0).to_bits());
            k.push((g + 0.0).to_bits());
            match index.get(&k) {
                Some(&c) => out.count[c] += 1.0,
                None => {
                    index.insert(k, out.f.len());
                    out.d.push(d);
                    out.f.push(f);
                    out.g.push(g);
                    out.count.push(1.0);
                }
            }
        }
        Ok(out)
    }

    fn ratio(&self, link: Link, alpha: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.f.len() {
            let h = link.h(dot(&self.d[i], alpha));
            num += self.count[i] * h * self.f[i];
            den += self.count[i] * h * self.g[i];
        }
        num / den
    }

    /// Ratio and its gradient in `alpha`.
    fn ratio_grad(&self, link: Link, alpha: &[f64], grad: &mut [f64]) -> f64 {
        let r = self.ratio(link, alpha);
        let mut den = 0.0;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..self.f.len() {
            let u = dot(&self.d[i], alpha);
            den += self.count[i] * link.h(u) * self.g[i];
            let c = self.count[i] * link.dh(u) * (self.f[i] - r * self.g[i]);
            for (gj, dj) in grad.iter_mut().zip(&self.d[i]) {
                *gj += c * dj;
            }
        }
        grad.iter_mut().for_each(|g| *g /= den);
        r
    }
}

struct Barrier<'a> {
    data: &'a RowData,
    red: &'a Reduced,
    link: Link,
    orient: f64,
    scale: f64,
}

impl Barrier<'_> {
    /// `-orient R / scale - mu sum log slack`, infinite outside the polytope.
    fn eval(&self, z: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        let n = z.len();
        let mut bar = 0.0;
        let mut gb = vec![0.0; n];
        for (r, &b) in self.red.rows.iter().zip(&self.red.rhs) {
            let sl = b - dot(r, z);
            if !(sl > 0.0) {
                return f64::INFINITY;
            }
            bar -= sl.ln();
            for i in 0..n {
                gb[i] += r[i] / sl;
            }
        }
        let alpha = self.red.embed(z);
        let mut ga = vec![0.0; alpha.len()];
        let r = self.data.ratio_grad(self.link, &alpha, &mut ga);
        for i in 0..n {
            grad[i] = -self.orient * ga[self.red.free[i]] / self.scale + mu * gb[i];
        }
        -self.orient * r / self.scale + mu * bar
    }

    /// BFGS along a decreasing barrier parameter.
    fn solve(&self, mut z: Vec<f64>) -> Vec<f64> {
        let n = z.len();
        let m = self.red.rows.len() as f64;
        let mut mu = MU_START;
        let mut grad = vec![0.0; n];
        let mut gnew = vec![0.0; n];
        while mu * m > 1e-11 {
            let mut hinv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            let mut fz = self.eval(&z, mu, &mut grad);
            for _ in 0..200 {
                let gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
                if gnorm < 1e-12 {
                    break;
                }
                let d: Vec<f64> = (0..n).map(|i| -dot(&hinv[i], &grad)).collect();
                let mut slope = dot(&d, &grad);
                let d = if slope >= 0.0 {
                    hinv = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
                    slope = -dot(&grad, &grad);
                    grad.iter().map(|g| -g).collect()
                } else {
                    d
                };
                let mut lam = self.red.max_step(&z, &d).min(1.0 / 0.99) * 0.99;
                lam = lam.min(1.0);
                let mut accepted = None;
                for _ in 0..60 {
                    let zn: Vec<f64> = (0..n).map(|i| z[i] + lam * d[i]).collect();
                    let fnew = self.eval(&zn, mu, &mut gnew);
                    if fnew <= fz + 1e-4 * lam * slope {
                        accepted = Some((zn, fnew));
                        break;
                    }
                    lam *= 0.5;
                }
                let Some((zn, fnew)) = accepted else { break };
                let s: Vec<f64> = (0..n).map(|i| zn[i] - z[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| gnew[i] - grad[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-300 {
                    let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i], &y)).collect();
                    let yhy = dot(&y, &hy);
                    for i in 0..n {
                        for j in 0..n {
                            hinv[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                        }
                    }
                }
                let improvement = fz - fnew;
                z = zn;
                fz = fnew;
                std::mem::swap(&mut grad, &mut gnew);
                if improvement <= 1e-16 * fz.abs().max(1.0) {
                    break;
                }
            }
            mu *= 0.1;
        }
        z
    }
}

/// Extreme values of the row-level weighted ratio over the parametric family.
pub fn solve_parametric_bounds(
    obs: &ObservationSet,
    est: &Estimand,
    bx: &WeightBox,
    family: &ParametricFamily,
) -> Result<ParametricInterval> {
    solve_parametric_bounds_with(obs, est, bx, family, &ParametricOptions::default())
}

pub fn solve_parametric_bounds_with(
    obs: &ObservationSet,
    est: &Estimand,
    bx: &WeightBox,
    family: &ParametricFamily,
    opts: &ParametricOptions,
) -> Result<ParametricInterval> {
    if family.d() + 1 > 20 {
        return Err(Error::InvalidArgument(format!("{} selection coefficients exceed 20", family.d() + 1)));
    }
    let poly = feasible_alpha_polytope(obs, bx, family)?;
    let data = RowData::new(selection_matrix(obs, family)?, obs, est)?;
    let table = SupportTable::from_counts(data.f.clone(), data.g.clone(), data.count.clone())?;
    let nonpar = lfp::solve_bounds(&table, bx)?;
    let (lower, upper) = poly.index_bounds;

    if upper - lower <= 0.0 {
        // Every weight equals 1/a, so the ratio is the unweighted estimate.
        let mut alpha = vec![0.0; poly.dim];
        alpha[0] = upper;
        if !poly.contains(&alpha, 1e-12) {
            return Err(Error::InfeasiblePolytope);
        }
        let beta = data.ratio(family.link, &alpha);
        let active = poly.slacks(&alpha).iter().filter(|&&s| s <= 1e-6).count();
        return Ok(ParametricInterval {
            beta_lo: beta,
            beta_hi: beta,
            alpha_lo: alpha.clone(),
            alpha_hi: alpha,
            diagnostics: ParametricDiagnostics {
                restarts: 0,
                active_constraints: (active, active),
            },
        });
    }

    let red = Reduced::new(&poly, family)?;
    // Indices far below the upper bound give weights near 1 and a flat
    // objective, so half the starts come from a polytope that excludes them.
    let work_lower = lower.max(upper - WORKING_SPAN);
    let pools = if work_lower > lower {
        let work = Reduced::new(&polytope(&selection_matrix(obs, family)?, work_lower, upper, family), family)?;
        vec![red.analytic_center(red.interior_point()?), work.analytic_center(work.interior_point()?)]
            .into_iter()
            .zip([&red, &work].map(|r| (r.rows.clone(), r.rhs.clone())))
            .collect::<Vec<_>>()
    } else {
        vec![(red.analytic_center(red.interior_point()?), (red.rows.clone(), red.rhs.clone()))]
    };
    let n = red.dim();
    let total = opts.multistarts.max(pools.len());
    let mut starts = Vec::with_capacity(total);
    for (p, (center, _)) in pools.iter().enumerate() {
        if starts.len() < total {
            starts.push((p, center.clone()));
        }
    }
    let mut idx = 0u64;
    while starts.len() < total {
        let p = starts.len() % pools.len();
        let (center, (rows, rhs)) = &pools[p];
        let mut rng = substream(opts.seed, domain::MULTISTART, idx);
        idx += 1;
        let u: Vec<f64> = (0..n).map(|_| crate::rng::standard_normal(&mut rng)).collect();
        let smax = rows
            .iter()
            .zip(rhs)
            .filter(|(r, _)| dot(r, &u) > 0.0)
            .map(|(r, &b)| (b - dot(r, center)) / dot(r, &u))
            .fold(f64::INFINITY, f64::min);
        if !smax.is_finite() {
            continue;
        }
        let t = rng.random::<f64>() * 0.95 * smax;
        starts.push((p, (0..n).map(|i| center[i] + t * u[i]).collect()));
    }
    let starts: Vec<Vec<f64>> = starts.into_iter().map(|(_, z)| z).collect();
    let scale = if nonpar.width() > 0.0 { nonpar.width() } else { 1.0 };
    let jobs = 2 * starts.len();
    let results = opts.exec.map(jobs, |job| {
        let dir = if job % 2 == 0 { Direction::Min } else { Direction::Max };
        let barrier = Barrier {
            data: &data,
            red: &red,
            link: family.link,
            orient: if dir == Direction::Max { 1.0 } else { -1.0 },
            scale,
        };
        let z = barrier.solve(starts[job / 2].clone());
        let alpha = red.embed(&z);
        (data.ratio(family.link, &alpha), alpha)
    });
    let mut lo: Option<(f64, Vec<f64>)> = None;
    let mut hi: Option<(f64, Vec<f64>)> = None;
    for (job, (value, alpha)) in results.into_iter().enumerate() {
        if !value.is_finite() || !poly.contains(&alpha, 1e-8) {
            continue;
        }
        if job % 2 == 0 {
            if lo.as_ref().is_none_or(|b| value < b.0) {
                lo = Some((value, alpha));
            }
        } else if hi.as_ref().is_none_or(|b| value > b.0) {
            hi = Some((value, alpha));
        }
    }
    let ((beta_lo, alpha_lo), (beta_hi, alpha_hi)) = match (lo, hi) {
        (Some(l), Some(h)) => (l, h),
        _ => return Err(Error::NonConvergence { residual: f64::INFINITY }),
    };
    let active = |a: &[f64]| poly.slacks(a).iter().filter(|&&s| s <= 1e-6).count();
    Ok(ParametricInterval {
        beta_lo,
        beta_hi,
        diagnostics: ParametricDiagnostics {
            restarts: starts.len(),
            active_constraints: (active(&alpha_lo), active(&alpha_hi)),
        },
        alpha_lo,
        alpha_hi,
    })
}
