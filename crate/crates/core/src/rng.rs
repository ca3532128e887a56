//! Deterministic random streams and the samplers used by the simulation
//! harness.
//!
//! Each stream is a ChaCha8 generator keyed by `(seed, domain)` and positioned
//! on the 64-bit stream `index`, so replicate `r` always sees the same draws no
//! matter which thread runs it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream `index` of the generator family identified by `(seed, domain)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let key = splitmix64(seed ^ splitmix64(domain.wrapping_add(0x5EED)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Domain tags keeping the streams of different consumers disjoint.
pub mod domain {
    pub const POPULATION: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const MULTISTART: u64 = 4;
    pub const CONSIM: u64 = 5;
}

/// Standard normal draw by the Marsaglia polar method.
///
/// Only one of the two generated variates is returned, keeping each call
/// independent of any cached state.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let v: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Binomial(trials, p) probability mass function, computed in log space.
pub fn binomial_pmf(trials: u32, p: f64) -> Vec<f64> {
    let n = trials as usize;
    let mut log_fact = vec![0.0_f64; n + 1];
    for k in 1..=n {
        log_fact[k] = log_fact[k - 1] + (k as f64).ln();
    }
    (0..=n)
        .map(|k| {
            let lc = log_fact[n] - log_fact[k] - log_fact[n - k];
            let lp = if p == 0.0 {
                if k == 0 { 0.0 } else { f64::NEG_INFINITY }
            } else if p == 1.0 {
                if k == n { 0.0 } else { f64::NEG_INFINITY }
            } else {
                k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
            };
            (lc + lp).exp()
        })
        .collect()
}

/// Inversion sampler for a binomial distribution with a small trial count.
#[derive(Debug, Clone)]
pub struct BinomialInversion {
    cdf: Vec<f64>,
}

impl BinomialInversion {
    pub fn new(trials: u32, p: f64) -> Self {
        let pmf = binomial_pmf(trials, p);
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = pmf
            .iter()
            .map(|&q| {
                acc += q;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| substream(7, 1, 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| substream(7, 1, 3).random()).collect();
        assert_eq!(a, b);
        let mut r1 = substream(7, 1, 3);
        let mut r2 = substream(7, 1, 4);
        let mut r3 = substream(7, 2, 3);
        let x1: u64 = r1.random();
        assert_ne!(x1, r2.random::<u64>());
        assert_ne!(x1, r3.random::<u64>());
    }

    #[test]
    fn polar_normal_moments() {
        let mut rng = substream(11, 0, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn binomial_pmf_sums_to_one_and_matches_small_case() {
        let pmf = binomial_pmf(100, 0.5);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p2 = binomial_pmf(2, 0.5);
        assert!((p2[0] - 0.25).abs() < 1e-15);
        assert!((p2[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binomial_inversion_mean_and_variance() {
        let sampler = BinomialInversion::new(100, 0.5);
        let mut rng = substream(3, 0, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 50.0).abs() < 0.05, "mean {mean}");
        assert!((var - 25.0).abs() < 0.5, "var {var}");
    }
}
