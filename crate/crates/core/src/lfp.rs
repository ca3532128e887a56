//! Box-constrained linear fractional programs.
//!
//! The maximum of `sum w f p / sum w g p` over `w in [lo, hi]^K` is attained
//! at a vertex whose weights switch once when cells are ordered by `f/g`. The
//! threshold solver enumerates the `K + 1` switch positions with prefix sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sum::CompensatedSum;
use crate::support::{weighted_sums, IntervalEstimate, SupportTable, WeightBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Max,
    Min,
}

const TIE_RTOL: f64 = 1e-13;
const DEGENERATE_RTOL: f64 = 1e-12;

/// Cells sorted by `f/g`, ties by index, with the `g = 0` cells kept apart.
///
/// The order depends only on `(f, g)`, so it can be reused across tables that
/// share moments but differ in mass (bootstrap resamples).
#[derive(Debug, Clone)]
pub struct RatioOrder {
    sorted: Vec<usize>,
    zero_g: Vec<usize>,
}

impl RatioOrder {
    pub fn new(f: &[f64], g: &[f64]) -> Self {
        let (mut sorted, zero_g): (Vec<usize>, Vec<usize>) =
            (0..f.len()).partition(|&k| g[k] != 0.0);
        sorted.sort_by(|&i, &j| (f[i] / g[i]).total_cmp(&(f[j] / g[j])).then(i.cmp(&j)));
        Self { sorted, zero_g }
    }
}

/// Orientation of the denominator over the box: `1.0` when it is positive
/// everywhere, `-1.0` when negative everywhere.
pub fn denominator_sign(g: &[f64], mass: &[f64], lo: f64, hi: f64) -> Result<f64> {
    let mut dmin = CompensatedSum::new();
    let mut dmax = CompensatedSum::new();
    for (&gk, &mk) in g.iter().zip(mass) {
        let c = gk * mk;
        if c > 0.0 {
            dmin.add(c * lo);
            dmax.add(c * hi);
        } else {
            dmin.add(c * hi);
            dmax.add(c * lo);
        }
    }
    if dmin.value() > 0.0 {
        Ok(1.0)
    } else if dmax.value() < 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::ZeroDenominator)
    }
}

/// Weights taken by a sorted cell below and above the switch point.
#[inline]
fn side_weights(c: f64, dir: Direction, lo: f64, hi: f64) -> (f64, f64) {
    // Above the switch the ratio exceeds the optimum, so `a - beta c` has the
    // sign of `c`; the maximizer takes `hi` exactly where that is positive.
    match (c > 0.0, dir) {
        (true, Direction::Max) | (false, Direction::Min) => (lo, hi),
        (false, Direction::Max) | (true, Direction::Min) => (hi, lo),
    }
}

#[inline]
fn fixed_weight(a: f64, dir: Direction, lo: f64, hi: f64) -> f64 {
    match dir {
        Direction::Max if a > 0.0 => hi,
        Direction::Min if a < 0.0 => hi,
        _ => lo,
    }
}

/// Extremal value and switch position of the threshold enumeration.
struct Threshold {
    value: f64,
    switch: usize,
    sign: f64,
}

fn threshold(
    f: &[f64],
    g: &[f64],
    mass: &[f64],
    order: &RatioOrder,
    lo: f64,
    hi: f64,
    dir: Direction,
) -> Result<Threshold> {
    let sign = denominator_sign(g, mass, lo, hi)?;
    let mut fixed_num = CompensatedSum::new();
    for &k in &order.zero_g {
        let a = sign * f[k] * mass[k];
        fixed_num.add(fixed_weight(a, dir, lo, hi) * a);
    }
    let m = order.sorted.len();
    let mut pre_num = Vec::with_capacity(m + 1);
    let mut pre_den = Vec::with_capacity(m + 1);
    let (mut pn, mut pd) = (CompensatedSum::new(), CompensatedSum::new());
    pre_num.push(0.0);
    pre_den.push(0.0);
    for &k in &order.sorted {
        let (a, c) = (sign * f[k] * mass[k], sign * g[k] * mass[k]);
        let (below, _) = side_weights(c, dir, lo, hi);
        pn.add(below * a);
        pd.add(below * c);
        pre_num.push(pn.value());
        pre_den.push(pd.value());
    }
    let mut suf_num = vec![0.0; m + 1];
    let mut suf_den = vec![0.0; m + 1];
    let (mut sn, mut sd) = (CompensatedSum::new(), CompensatedSum::new());
    for i in (0..m).rev() {
        let k = order.sorted[i];
        let (a, c) = (sign * f[k] * mass[k], sign * g[k] * mass[k]);
        let (_, above) = side_weights(c, dir, lo, hi);
        sn.add(above * a);
        sd.add(above * c);
        suf_num[i] = sn.value();
        suf_den[i] = sd.value();
    }
    let fnum = fixed_num.value();
    let values: Vec<f64> = (0..=m)
        .map(|j| (pre_num[j] + suf_num[j] + fnum) / (pre_den[j] + suf_den[j]))
        .collect();
    let best = match dir {
        Direction::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Direction::Min => values.iter().cloned().fold(f64::INFINITY, f64::min),
    };
    let tol = TIE_RTOL * best.abs().max(1.0);
    let switch = values
        .iter()
        .position(|&v| match dir {
            Direction::Max => v >= best - tol,
            Direction::Min => v <= best + tol,
        })
        .unwrap_or(0);
    Ok(Threshold {
        value: values[switch],
        switch,
        sign,
    })
}

fn threshold_weights(
    f: &[f64],
    g: &[f64],
    mass: &[f64],
    order: &RatioOrder,
    lo: f64,
    hi: f64,
    dir: Direction,
    t: &Threshold,
) -> Vec<f64> {
    let mut w = vec![lo; f.len()];
    for &k in &order.zero_g {
        w[k] = fixed_weight(t.sign * f[k] * mass[k], dir, lo, hi);
    }
    for (i, &k) in order.sorted.iter().enumerate() {
        let (below, above) = side_weights(t.sign * g[k] * mass[k], dir, lo, hi);
        w[k] = if i < t.switch { below } else { above };
    }
    w
}

/// Cells whose ratio `f/g` equals `beta`, including cells with `f = g = 0`.
pub fn degenerate_cells(f: &[f64], g: &[f64], beta: f64) -> Vec<usize> {
    (0..f.len())
        .filter(|&k| {
            let bg = beta * g[k];
            (f[k] - bg).abs() <= DEGENERATE_RTOL * (f[k].abs() + bg.abs())
        })
        .collect()
}

/// Both interval endpoints without the weight vectors, reusing a precomputed
/// ratio order. Cells with zero mass are ignored.
pub fn bounds_with_order(
    f: &[f64],
    g: &[f64],
    mass: &[f64],
    order: &RatioOrder,
    bx: &WeightBox,
) -> Result<(f64, f64)> {
    let lo = threshold(f, g, mass, order, bx.lo(), bx.hi(), Direction::Min)?;
    let hi = threshold(f, g, mass, order, bx.lo(), bx.hi(), Direction::Max)?;
    Ok((lo.value, hi.value))
}

/// One endpoint of the identified interval with its optimizing vertex.
pub fn solve_direction(table: &SupportTable, bx: &WeightBox, dir: Direction) -> Result<(f64, Vec<f64>)> {
    let order = RatioOrder::new(table.f(), table.g());
    solve_direction_with_order(table, &order, bx, dir)
}

fn solve_direction_with_order(
    table: &SupportTable,
    order: &RatioOrder,
    bx: &WeightBox,
    dir: Direction,
) -> Result<(f64, Vec<f64>)> {
    let (f, g, m) = (table.f(), table.g(), table.mass());
    let t = threshold(f, g, m, order, bx.lo(), bx.hi(), dir)?;
    let w = threshold_weights(f, g, m, order, bx.lo(), bx.hi(), dir, &t);
    Ok((t.value, w))
}

/// Identified interval `[min, max]` of the weighted ratio over the box, by
/// threshold enumeration in `O(K log K)`.
pub fn solve_bounds(table: &SupportTable, bx: &WeightBox) -> Result<IntervalEstimate> {
    let order = RatioOrder::new(table.f(), table.g());
    let (beta_lo, w_lo) = solve_direction_with_order(table, &order, bx, Direction::Min)?;
    let (beta_hi, w_hi) = solve_direction_with_order(table, &order, bx, Direction::Max)?;
    Ok(IntervalEstimate {
        beta_lo,
        beta_hi,
        degenerate_cells_lo: degenerate_cells(table.f(), table.g(), beta_lo),
        degenerate_cells_hi: degenerate_cells(table.f(), table.g(), beta_hi),
        w_lo,
        w_hi,
    })
}

/// Exhaustive search over all `2^K` vertices of the box.
pub fn solve_bounds_bruteforce(table: &SupportTable, bx: &WeightBox) -> Result<IntervalEstimate> {
    let k = table.k();
    if k > 20 {
        return Err(Error::SupportTooLarge(k));
    }
    denominator_sign(table.g(), table.mass(), bx.lo(), bx.hi())?;
    let (lo, hi) = (bx.lo(), bx.hi());
    let mut best_lo = (f64::INFINITY, 0u32);
    let mut best_hi = (f64::NEG_INFINITY, 0u32);
    let mut w = vec![lo; k];
    for mask in 0u32..(1u32 << k) {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = if mask >> i & 1 == 1 { hi } else { lo };
        }
        let (num, den) = weighted_sums(table, &w)?;
        let v = num / den;
        if v < best_lo.0 {
            best_lo = (v, mask);
        }
        if v > best_hi.0 {
            best_hi = (v, mask);
        }
    }
    let to_w = |mask: u32| -> Vec<f64> {
        (0..k).map(|i| if mask >> i & 1 == 1 { hi } else { lo }).collect()
    };
    Ok(IntervalEstimate {
        beta_lo: best_lo.0,
        beta_hi: best_hi.0,
        w_lo: to_w(best_lo.1),
        w_hi: to_w(best_hi.1),
        degenerate_cells_lo: degenerate_cells(table.f(), table.g(), best_lo.0),
        degenerate_cells_hi: degenerate_cells(table.f(), table.g(), best_hi.0),
    })
}

/// First-order test of global optimality of a vertex `w` with value `beta`:
/// with `q = 2w - lo - hi`, `w` maximizes iff `q (f - beta g) >= 0` in every
/// cell (reversed for the minimum and for a negative denominator).
pub fn check_global_optimality(
    table: &SupportTable,
    bx: &WeightBox,
    w: &[f64],
    beta: f64,
    dir: Direction,
) -> Result<bool> {
    if w.len() != table.k() {
        return Err(Error::LengthMismatch {
            expected: table.k(),
            got: w.len(),
        });
    }
    let (lo, hi) = (bx.lo(), bx.hi());
    let vtol = 1e-9 * hi;
    if let Some(index) = w
        .iter()
        .position(|&x| (x - lo).abs() > vtol && (x - hi).abs() > vtol)
    {
        return Err(Error::NotAVertex { index });
    }
    let (_, den) = weighted_sums(table, w)?;
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let orient = match dir {
        Direction::Max => den.signum(),
        Direction::Min => -den.signum(),
    };
    let (f, g) = (table.f(), table.g());
    Ok((0..table.k()).all(|k| {
        let q = if (w[k] - hi).abs() <= vtol { hi - lo } else { lo - hi };
        let d = f[k] - beta * g[k];
        let tol = 1e-10 * (f[k].abs() + (beta * g[k]).abs() + 1.0) * (hi - lo);
        orient * q * d >= -tol
    }))
}

/// Maximizes `sum l w` over the box subject to `sum u w = t`.
///
/// Returns `None` when `t` is outside the attainable range. At most one cell
/// takes a weight strictly inside the box.
pub fn linear_knapsack(l: &[f64], u: &[f64], t: f64, lo: f64, hi: f64) -> Option<Vec<f64>> {
    let k = l.len();
    let mut w = vec![lo; k];
    let mut s_max = CompensatedSum::new();
    let mut s_min = CompensatedSum::new();
    let mut movable = Vec::new();
    for i in 0..k {
        if u[i] == 0.0 {
            w[i] = if l[i] > 0.0 { hi } else { lo };
        } else {
            w[i] = if u[i] > 0.0 { hi } else { lo };
            s_max.add(u[i] * if u[i] > 0.0 { hi } else { lo });
            s_min.add(u[i] * if u[i] > 0.0 { lo } else { hi });
            movable.push(i);
        }
    }
    let (smax, smin) = (s_max.value(), s_min.value());
    let span = movable.iter().map(|&i| u[i].abs()).sum::<f64>() * hi;
    let tol = 1e-12 * span.max(t.abs()).max(1e-300);
    if t > smax + tol || t < smin - tol {
        return None;
    }
    movable.sort_by(|&i, &j| (l[i] / u[i]).total_cmp(&(l[j] / u[j])).then(i.cmp(&j)));
    // Raising the multiplier past l_i/u_i moves cell i to its other bound,
    // lowering sum u w by |u_i| (hi - lo).
    let mut s = smax;
    for &i in &movable {
        let drop = u[i].abs() * (hi - lo);
        if s - drop <= t {
            let frac = if drop > 0.0 { ((s - t) / drop).clamp(0.0, 1.0) } else { 0.0 };
            w[i] = if u[i] > 0.0 {
                hi - frac * (hi - lo)
            } else {
                lo + frac * (hi - lo)
            };
            return Some(w);
        }
        s -= drop;
        w[i] = if u[i] > 0.0 { lo } else { hi };
    }
    Some(w)
}

/// Optimum of the weighted ratio over the box intersected with the
/// hyperplane `sum u w = t`, by Dinkelbach iteration on the knapsack LP.
pub fn solve_with_equality(
    table: &SupportTable,
    bx: &WeightBox,
    u: &[f64],
    t: f64,
    dir: Direction,
) -> Result<(f64, Vec<f64>)> {
    let k = table.k();
    if u.len() != k {
        return Err(Error::LengthMismatch { expected: k, got: u.len() });
    }
    let (lo, hi) = (bx.lo(), bx.hi());
    let sign = denominator_sign(table.g(), table.mass(), lo, hi)?;
    let orient = match dir {
        Direction::Max => 1.0,
        Direction::Min => -1.0,
    };
    let a: Vec<f64> = (0..k).map(|i| orient * sign * table.f()[i] * table.mass()[i]).collect();
    let c: Vec<f64> = (0..k).map(|i| sign * table.g()[i] * table.mass()[i]).collect();
    let ratio = |w: &[f64]| -> f64 {
        let num = crate::sum::sum((0..k).map(|i| w[i] * a[i]));
        let den = crate::sum::sum((0..k).map(|i| w[i] * c[i]));
        num / den
    };
    let mut w = linear_knapsack(&c, u, t, lo, hi).ok_or(Error::InfeasibleConstraints)?;
    let mut beta = ratio(&w);
    let scale = crate::sum::sum(a.iter().map(|x| x.abs() * hi))
        + crate::sum::sum(c.iter().map(|x| x.abs() * hi));
    for _ in 0..200 {
        let l: Vec<f64> = (0..k).map(|i| a[i] - beta * c[i]).collect();
        let next = linear_knapsack(&l, u, t, lo, hi).ok_or(Error::InfeasibleConstraints)?;
        let gain = crate::sum::sum((0..k).map(|i| l[i] * next[i]));
        let nb = ratio(&next);
        if nb > beta {
            beta = nb;
            w = next;
        }
        if gain <= 1e-14 * scale {
            break;
        }
    }
    Ok((orient * beta, w))
}
