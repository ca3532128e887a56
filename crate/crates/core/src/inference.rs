//! Asymptotic inference for the interval endpoints.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::sum::CompensatedSum;
use crate::support::{IntervalEstimate, SupportTable};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Upper `alpha` quantile `Z_alpha` of the standard normal.
pub fn upper_quantile(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(std_normal().inverse_cdf(1.0 - alpha))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Delta-method variance of the weighted ratio at fixed weights:
/// `sum p [w (f - beta g)]^2 / (sum p w g)^2`.
pub fn sigma2_hat(table: &SupportTable, w: &[f64], beta_w: f64) -> Result<f64> {
    if w.len() != table.k() {
        return Err(Error::LengthMismatch {
            expected: table.k(),
            got: w.len(),
        });
    }
    let (p, f, g) = (table.phat(), table.f(), table.g());
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for k in 0..table.k() {
        let r = w[k] * (f[k] - beta_w * g[k]);
        num.add(p[k] * r * r);
        den.add(p[k] * w[k] * g[k]);
    }
    let d = den.value();
    if d == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num.value().max(0.0) / (d * d))
}

/// Two-sided confidence interval for the identified interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticCI {
    pub c_lo: f64,
    pub c_hi: f64,
    pub alpha: f64,
    /// Standard error `sigma_hat(w_lo) / sqrt(n)` of the lower endpoint.
    pub se_lo: f64,
    /// Standard error `sigma_hat(w_hi) / sqrt(n)` of the upper endpoint.
    pub se_hi: f64,
    pub n: usize,
}

impl AsymptoticCI {
    pub fn width(&self) -> f64 {
        self.c_hi - self.c_lo
    }

    pub fn contains(&self, lo: f64, hi: f64) -> bool {
        self.c_lo <= lo && hi <= self.c_hi
    }
}

/// Standard errors of both endpoints.
pub fn endpoint_standard_errors(ie: &IntervalEstimate, table: &SupportTable) -> Result<(f64, f64)> {
    let sqrt_n = (table.n() as f64).sqrt();
    let s_lo = sigma2_hat(table, &ie.w_lo, ie.beta_lo)?.sqrt();
    let s_hi = sigma2_hat(table, &ie.w_hi, ie.beta_hi)?.sqrt();
    Ok((s_lo / sqrt_n, s_hi / sqrt_n))
}

/// `[beta_lo - Z_{alpha/2} se_lo, beta_hi + Z_{alpha/2} se_hi]`.
pub fn confidence_interval(ie: &IntervalEstimate, table: &SupportTable, alpha: f64) -> Result<AsymptoticCI> {
    let (se_lo, se_hi) = endpoint_standard_errors(ie, table)?;
    ci_from_parts(ie.beta_lo, ie.beta_hi, se_lo, se_hi, table.n(), alpha)
}

pub fn ci_from_parts(
    beta_lo: f64,
    beta_hi: f64,
    se_lo: f64,
    se_hi: f64,
    n: usize,
    alpha: f64,
) -> Result<AsymptoticCI> {
    let z = upper_quantile(alpha / 2.0)?;
    Ok(AsymptoticCI {
        c_lo: beta_lo - z * se_lo,
        c_hi: beta_hi + z * se_hi,
        alpha,
        se_lo,
        se_hi,
        n,
    })
}

/// p-value for `H0: beta_tilde in [beta_lo, beta_hi]`:
/// `Phi((beta_hi - bt)/se_hi) - Phi((beta_lo - bt)/se_lo)`, clamped to `[0, 1]`.
pub fn p_value(ie: &IntervalEstimate, table: &SupportTable, beta_tilde: f64) -> Result<f64> {
    let (se_lo, se_hi) = endpoint_standard_errors(ie, table)?;
    Ok(p_value_from_parts(ie.beta_lo, ie.beta_hi, se_lo, se_hi, beta_tilde))
}

pub fn p_value_from_parts(beta_lo: f64, beta_hi: f64, se_lo: f64, se_hi: f64, beta_tilde: f64) -> f64 {
    // With a zero standard error the normal term becomes a step; the
    // boundary counts as inside the interval.
    let upper = if se_hi > 0.0 {
        normal_cdf((beta_hi - beta_tilde) / se_hi)
    } else if beta_hi >= beta_tilde {
        1.0
    } else {
        0.0
    };
    let lower = if se_lo > 0.0 {
        normal_cdf((beta_lo - beta_tilde) / se_lo)
    } else if beta_lo > beta_tilde {
        1.0
    } else {
        0.0
    };
    (upper - lower).clamp(0.0, 1.0)
}
