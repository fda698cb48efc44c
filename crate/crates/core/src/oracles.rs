//! Brute-force and Monte Carlo reference computations used to validate the
//! analytical code paths.
//!
//! Each oracle takes a route independent of the code it checks: exact
//! rational arithmetic instead of floating-point recurrences, `2^N` subset
//! enumeration instead of dynamic programming, and simulation instead of
//! closed forms.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{lemma_h_minus, one_sided_binomial_bound, poisson_binomial_cdf, Side, Tail};
use crate::error::{invalid, Error, Result};
use crate::rng::stream;
use crate::stats::{fpr_binomial, EXACT_BINOMIAL_MAX_N};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    ExactEnumeration,
    ExactInteger,
    MonteCarlo,
    /// Exact path unavailable; value from the floating-point log-domain kernel.
    LogDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_error: Option<f64>,
    /// Exact value as `numerator/denominator` when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
}

impl OracleResult {
    fn exact(value: &BigRational, method: OracleMethod) -> Self {
        Self {
            value: ratio_to_f64(value),
            method,
            trials: None,
            standard_error: None,
            exact: Some(format!("{}/{}", value.numer(), value.denom())),
        }
    }

    fn monte_carlo(hits: u64, trials: u64) -> Self {
        let p = hits as f64 / trials as f64;
        Self {
            value: p,
            method: OracleMethod::MonteCarlo,
            trials: Some(trials),
            standard_error: Some((p * (1.0 - p) / trials as f64).sqrt()),
            exact: None,
        }
    }
}

/// Correctly scaled conversion that survives numerators and denominators
/// beyond the `f64` range.
pub fn ratio_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let (n, d) = (r.numer(), r.denom());
    let shift = n.bits() as i64 - d.bits() as i64;
    // Bring the quotient into [2^52, 2^54) and divide as integers.
    let scale = 53 - shift;
    let q = if scale >= 0 {
        (n << scale as usize) / d
    } else {
        n / (d << (-scale) as usize)
    };
    q.to_f64().expect("53-bit quotient") * 2f64.powi(-scale as i32)
}

fn binomial_big(n: usize, k: usize) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, i| {
        acc * BigInt::from(n - i) / BigInt::from(i + 1)
    })
}

/// `sum_{j<=tau} C(n,j) (1-r)^j r^(n-j)` in exact rational arithmetic.
pub fn exact_binomial_tail_rational(n: usize, tau: usize, r: &BigRational) -> BigRational {
    let one = BigRational::one();
    let q = &one - r;
    (0..=tau.min(n)).fold(BigRational::zero(), |acc, j| {
        let term = BigRational::from_integer(binomial_big(n, j))
            * num_traits::pow(q.clone(), j)
            * num_traits::pow(r.clone(), n - j);
        acc + term
    })
}

/// Binomial lower tail with `r` taken as the exact rational value of the
/// given `f64`. Beyond `n = 64` the floating-point kernel is reported instead.
pub fn exact_binomial_tail(n: usize, tau: usize, r: f64) -> Result<OracleResult> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid(format!("match probability {r} outside [0, 1]")));
    }
    if n > EXACT_BINOMIAL_MAX_N {
        return Ok(OracleResult {
            value: fpr_binomial(r, n, tau)?,
            method: OracleMethod::LogDomain,
            trials: None,
            standard_error: None,
            exact: None,
        });
    }
    let r = BigRational::from_float(r).expect("finite");
    Ok(OracleResult::exact(
        &exact_binomial_tail_rational(n, tau, &r),
        OracleMethod::ExactInteger,
    ))
}

pub const ENUMERATION_MAX_N: usize = 20;

/// `P(S < d)` or `P(S > d)` by summing the probability of every subset
/// of successes.
pub fn brute_force_poisson_binomial(probs: &[f64], d: usize, tail: Tail) -> Result<OracleResult> {
    let n = probs.len();
    if n > ENUMERATION_MAX_N {
        return Err(invalid(format!(
            "enumeration refused for N = {n} > {ENUMERATION_MAX_N}"
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    let exact: Vec<BigRational> = probs
        .iter()
        .map(|&p| BigRational::from_float(p).expect("finite"))
        .collect();
    let one = BigRational::one();
    let mut total = BigRational::zero();
    for mask in 0u32..(1u32 << n) {
        let s = mask.count_ones() as usize;
        let keep = match tail {
            Tail::Below => s < d,
            Tail::Above => s > d,
        };
        if !keep {
            continue;
        }
        let mut p = BigRational::one();
        for (i, pi) in exact.iter().enumerate() {
            p *= if mask >> i & 1 == 1 {
                pi.clone()
            } else {
                &one - pi
            };
        }
        total += p;
    }
    Ok(OracleResult::exact(&total, OracleMethod::ExactEnumeration))
}

const MC_CHUNK: u64 = 1 << 14;

/// Empirical `P(S < d)` over `trials` simulated Bernoulli sums.
pub fn monte_carlo_bernoulli_sum(
    probs: &[f64],
    d: usize,
    trials: u64,
    seed: u64,
) -> Result<OracleResult> {
    if trials < 10_000 {
        return Err(invalid("Monte Carlo oracle needs at least 10^4 trials"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, &[0xB5, c]);
            let count = MC_CHUNK.min(trials - c * MC_CHUNK);
            (0..count)
                .filter(|_| probs.iter().filter(|&&p| rng.random_bool(p)).count() < d)
                .count() as u64
        })
        .sum();
    Ok(OracleResult::monte_carlo(hits, trials))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRate {
    /// Events divided by counted replications.
    pub rate: f64,
    pub events: u64,
    /// Replications that entered the rate.
    pub counted: u64,
    /// Replications excluded from the rate (bound not applicable).
    pub excluded: u64,
    /// `sqrt(rate (1 - rate) / counted)`.
    pub standard_error: f64,
}

impl SimulationRate {
    fn new(events: u64, counted: u64, excluded: u64) -> Self {
        let rate = if counted == 0 {
            0.0
        } else {
            events as f64 / counted as f64
        };
        let standard_error = if counted == 0 {
            0.0
        } else {
            (rate * (1.0 - rate) / counted as f64).sqrt()
        };
        Self {
            rate,
            events,
            counted,
            excluded,
            standard_error,
        }
    }

    /// Standard error of a rate equal to `nominal` over the counted replications.
    pub fn nominal_se(&self, nominal: f64) -> f64 {
        if self.counted == 0 {
            return 0.0;
        }
        (nominal * (1.0 - nominal) / self.counted as f64).sqrt()
    }
}

/// Fraction of replications in which the one-sided Clopper-Pearson limit
/// excludes `true_p` (`true_p < L` for `Lower`, `true_p > U` for `Upper`).
pub fn coverage_simulation(
    true_p: f64,
    trials_per_rep: u64,
    level: f64,
    reps: u64,
    seed: u64,
    side: Side,
) -> Result<SimulationRate> {
    if reps < 1000 {
        return Err(invalid(
            "coverage simulation needs at least 10^3 replications",
        ));
    }
    // The limit depends only on the match count, so tabulate it once.
    let misses_at: Vec<bool> = (0..=trials_per_rep)
        .map(|m| {
            one_sided_binomial_bound(m, trials_per_rep, level, side).map(|b| match side {
                Side::Lower => true_p < b,
                Side::Upper => true_p > b,
            })
        })
        .collect::<Result<_>>()?;
    let dist = Binomial::new(trials_per_rep, true_p).map_err(|e| invalid(e.to_string()))?;
    let mut rng = stream(seed, &[0xC0DE]);
    let misses = (0..reps)
        .filter(|_| misses_at[dist.sample(&mut rng) as usize])
        .count() as u64;
    Ok(SimulationRate::new(misses, reps, 0))
}

/// Replays the lemma bound: each replication draws one detection count
/// `R_1 = sum_i Bernoulli(probs[i])`, forms `p_hat = R_1 / N`, and checks the
/// bound `h(p_hat, eps-)` against the exact `P(S < R_bar)`.
///
/// Replications where the bound is not applicable are counted in
/// `excluded`, never as passes.
pub fn lemma_validity_simulation(
    probs: &[f64],
    delta: f64,
    r_bar: usize,
    reps: u64,
    seed: u64,
) -> Result<SimulationRate> {
    let big_n = probs.len();
    let mean = probs.iter().sum::<f64>() / big_n.max(1) as f64;
    if big_n == 0 || !(r_bar > 0 && (r_bar as f64) < big_n as f64 * mean) {
        return Err(Error::NotApplicable(format!(
            "need 0 < R_bar < N p_bar, got R_bar = {r_bar}, N p_bar = {}",
            big_n as f64 * mean
        )));
    }
    let truth = poisson_binomial_cdf(probs, r_bar, Tail::Below)?;
    // h depends on the replication only through R_1.
    let bound_at: Vec<Option<f64>> = (0..=big_n)
        .map(
            |r1| match lemma_h_minus(r1 as f64 / big_n as f64, delta, r_bar, big_n) {
                Ok(h) => Ok(Some(h)),
                Err(Error::NotApplicable(_)) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect::<Result<_>>()?;
    let mut rng = stream(seed, &[0x1E33A]);
    let (mut violations, mut counted, mut excluded) = (0u64, 0u64, 0u64);
    for _ in 0..reps {
        let r1 = probs.iter().filter(|&&p| rng.random_bool(p)).count();
        match bound_at[r1] {
            Some(h) => {
                counted += 1;
                violations += u64::from(truth > h);
            }
            None => excluded += 1,
        }
    }
    Ok(SimulationRate::new(violations, counted, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_examples() {
        let r = exact_binomial_tail(32, 5, 0.5).unwrap();
        assert_eq!(r.exact.as_deref(), Some("242825/4294967296"));
        assert_eq!(r.method, OracleMethod::ExactInteger);
        assert_eq!(exact_binomial_tail(10, 10, 0.3).unwrap().value, 1.0);
        assert_eq!(exact_binomial_tail(10, 0, 0.0).unwrap().value, 0.0);
        assert_eq!(
            exact_binomial_tail(100, 3, 0.5).unwrap().method,
            OracleMethod::LogDomain
        );
    }

    #[test]
    fn ratio_conversion_is_correctly_scaled() {
        let tiny = BigRational::new(BigInt::one(), BigInt::one() << 1100usize);
        assert_eq!(ratio_to_f64(&tiny), 0.0f64.max(2f64.powi(-1100)));
        let third = BigRational::new(BigInt::from(1), BigInt::from(3));
        assert_eq!(ratio_to_f64(&third), 1.0 / 3.0);
        let big = BigRational::from_integer(BigInt::from(3) << 2000usize);
        assert_eq!(ratio_to_f64(&big), f64::INFINITY);
    }

    #[test]
    fn enumeration_examples() {
        let r = brute_force_poisson_binomial(&[0.2, 0.7], 2, Tail::Below).unwrap();
        assert!((r.value - 0.86).abs() < 1e-15);
        assert_eq!(
            brute_force_poisson_binomial(&[1.0; 6], 6, Tail::Below)
                .unwrap()
                .value,
            0.0
        );
        assert!(brute_force_poisson_binomial(&[0.5; 21], 3, Tail::Below).is_err());
    }

    #[test]
    fn monte_carlo_examples() {
        assert_eq!(
            monte_carlo_bernoulli_sum(&[1.0; 5], 5, 10_000, 1)
                .unwrap()
                .value,
            0.0
        );
        let r = monte_carlo_bernoulli_sum(&[0.5; 10], 2, 1_000_000, 2).unwrap();
        let se = r.standard_error.unwrap();
        assert!(
            (r.value - 11.0 / 1024.0).abs() < 4.0 * se,
            "{} ± {se}",
            r.value
        );
        assert!(r.value <= crate::bounds::chernoff_gamma(0.5, 2, 10).unwrap());
        assert!(monte_carlo_bernoulli_sum(&[0.5], 1, 10, 0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let half = coverage_simulation(0.5, 20, 0.5, 10_000, 3, Side::Lower).unwrap();
        assert!(half.rate <= 0.5 + 3.0 * half.nominal_se(0.5));
        let tiny = coverage_simulation(0.8, 200, 1e-6, 100_000, 4, Side::Lower).unwrap();
        assert_eq!(tiny.events, 0);
    }

    #[test]
    fn lemma_simulation_accounting() {
        let probs: Vec<f64> = (0..15).map(|i| 0.8 + 0.2 * i as f64 / 14.0).collect();
        let r = lemma_validity_simulation(&probs, 0.5, 10, 5_000, 9).unwrap();
        assert_eq!(r.counted + r.excluded, 5_000);
        assert!(r.rate <= 0.5 + 3.0 * r.nominal_se(0.5));
        assert!(matches!(
            lemma_validity_simulation(&[0.5; 10], 0.1, 6, 100, 0),
            Err(Error::NotApplicable(_))
        ));
    }
}
