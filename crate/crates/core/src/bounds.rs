//! Confidence bounds on bit-collision probabilities, Poisson-binomial
//! detection-rate bounds and Chernoff-Hoeffding bounds on observed rates.

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{invalid, Error, Result};
use crate::stats::fpr_binomial;
use crate::watermark::ExtractionBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// `P(S < d)`.
    Below,
    /// `P(S > d)`.
    Above,
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(())
}

/// `P(Bin(n, p) >= x)` for `1 <= x <= n`.
fn upper_tail(x: u64, n: u64, p: f64) -> f64 {
    beta_reg(x as f64, (n - x + 1) as f64, p)
}

const BISECTION_STEPS: usize = 200;

/// Exact one-sided Clopper-Pearson limit for a binomial proportion.
///
/// `Lower` returns `L` with `P(Bin(trials, L) >= matches) = level`, so that
/// `P(p < L) <= level`; `Upper` is the mirror image. Bisection ends on the
/// conservative side of the root.
pub fn one_sided_binomial_bound(matches: u64, trials: u64, level: f64, side: Side) -> Result<f64> {
    check_level(level)?;
    if trials == 0 || matches > trials {
        return Err(invalid(format!("{matches} matches in {trials} trials")));
    }
    let n = trials as f64;
    match side {
        Side::Lower if matches == 0 => Ok(0.0),
        Side::Lower if matches == trials => Ok(level.powf(1.0 / n)),
        Side::Upper if matches == trials => Ok(1.0),
        Side::Upper if matches == 0 => Ok(1.0 - level.powf(1.0 / n)),
        Side::Lower => {
            // P(X >= x | p) increases in p; keep `lo` where it is <= level.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if upper_tail(matches, trials, mid) <= level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(lo)
        }
        Side::Upper => {
            // P(X <= x | p) = 1 - P(X >= x + 1 | p) decreases in p; keep `hi`
            // where it is <= level.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if 1.0 - upper_tail(matches + 1, trials, mid) <= level {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        }
    }
}

/// Probability that an image is detected (at most `tau` mismatches among
/// `n` bits) when every bit matches independently with probability `r_bound`.
pub fn per_image_detection_prob(r_bound: f64, n: usize, tau: usize) -> Result<f64> {
    fpr_binomial(r_bound, n, tau)
}

fn check_unit<T: PartialOrd + Zero + One>(probs: &[T]) -> Result<()> {
    if probs.iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// `P(S < d)` for `S` a sum of independent Bernoulli(`probs[i]`), tracking
/// only the states `0..d`.
fn below<T>(probs: &[T], d: usize) -> T
where
    T: Clone + Zero + One + std::ops::Sub<Output = T>,
{
    if d == 0 {
        return T::zero();
    }
    let mut dist = vec![T::zero(); d];
    dist[0] = T::one();
    for p in probs {
        let q = T::one() - p.clone();
        for s in (0..d).rev() {
            let stay = dist[s].clone() * q.clone();
            dist[s] = if s > 0 {
                stay + dist[s - 1].clone() * p.clone()
            } else {
                stay
            };
        }
    }
    dist.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Exact Poisson-binomial tail by dynamic programming in `O(N * d)`.
///
/// `Above` is evaluated as `P(F < N - d)` on the failure count `F`, so small
/// upper tails are not lost to cancellation.
pub fn poisson_binomial_cdf<T>(probs: &[T], d: usize, tail: Tail) -> Result<T>
where
    T: Clone + PartialOrd + Zero + One + std::ops::Sub<Output = T>,
{
    check_unit(probs)?;
    let n = probs.len();
    if d > n {
        return Err(invalid(format!("threshold {d} exceeds {n} summands")));
    }
    Ok(match tail {
        Tail::Below => below(probs, d),
        Tail::Above => {
            let q: Vec<T> = probs.iter().map(|p| T::one() - p.clone()).collect();
            below(&q, n - d)
        }
    })
}

/// How per-bit estimates become per-image detection probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// Binomial tail `P(<= tau mismatches)` at the per-bit bound.
    #[default]
    PerImageTail,
    /// Use the per-bit bound itself as the per-image probability.
    LiteralPerBit,
}

/// How extraction outcomes are counted as trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One binomial over all bits, draws and models.
    #[default]
    Pooled,
    /// Separate bounds per bit position at level `level / n`.
    PerBit,
}

/// Interval estimate of the bit-collision probability for one trigger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitCollisionEstimate {
    pub trigger_id: usize,
    pub trials: u64,
    pub matches: u64,
    pub lower_l: f64,
    pub upper_u: f64,
    /// Per-trigger level (`alpha / N`).
    pub level: f64,
    /// Per-bit limits in [`PoolingMode::PerBit`]; empty when pooled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lower_bits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upper_bits: Vec<f64>,
}

impl BitCollisionEstimate {
    pub fn from_counts(trigger_id: usize, matches: u64, trials: u64, level: f64) -> Result<Self> {
        Ok(Self {
            trigger_id,
            trials,
            matches,
            lower_l: one_sided_binomial_bound(matches, trials, level, Side::Lower)?,
            upper_u: one_sided_binomial_bound(matches, trials, level, Side::Upper)?,
            level,
            lower_bits: Vec::new(),
            upper_bits: Vec::new(),
        })
    }

    /// Lower and upper per-image detection probabilities at `(n, tau)`.
    pub fn detection_probs(&self, n: usize, tau: usize, bridge: BridgeMode) -> Result<(f64, f64)> {
        if bridge == BridgeMode::LiteralPerBit {
            return Ok((self.lower_l, self.upper_u));
        }
        if self.lower_bits.is_empty() {
            return Ok((
                per_image_detection_prob(self.lower_l, n, tau)?,
                per_image_detection_prob(self.upper_u, n, tau)?,
            ));
        }
        if self.lower_bits.len() != n || self.upper_bits.len() != n {
            return Err(Error::DimensionMismatch {
                context: "per-bit estimates",
                expected: n,
                actual: self.lower_bits.len(),
            });
        }
        if tau >= n {
            return Ok((1.0, 1.0));
        }
        // At most tau mismatches <=> more than n - tau - 1 matches.
        let d = n - tau - 1;
        Ok((
            poisson_binomial_cdf(&self.lower_bits, d, Tail::Above)?,
            poisson_binomial_cdf(&self.upper_bits, d, Tail::Above)?,
        ))
    }
}

/// Estimates `l(x_i)`, `u(x_i)` from extractions of every trigger by `M`
/// models: `per_model[j][i]` is model `j`'s batch for trigger `i`.
///
/// Each trigger gets level `alpha / N`, so all `N` intervals hold jointly
/// with probability at least `1 - alpha`.
pub fn estimate_bit_collisions(
    per_model: &[Vec<ExtractionBatch>],
    alpha: f64,
    mode: PoolingMode,
) -> Result<Vec<BitCollisionEstimate>> {
    check_level(alpha)?;
    let first = per_model.first().ok_or_else(|| invalid("no models"))?;
    let n_triggers = first.len();
    if n_triggers == 0 || per_model.iter().any(|m| m.len() != n_triggers) {
        return Err(invalid(
            "every model must cover the same non-empty trigger list",
        ));
    }
    let level = alpha / n_triggers as f64;
    (0..n_triggers)
        .map(|i| {
            let batches: Vec<&ExtractionBatch> = per_model.iter().map(|m| &m[i]).collect();
            let n = batches[0].message_len();
            let trials: u64 = batches
                .iter()
                .map(|b| (b.k() * b.message_len()) as u64)
                .sum();
            let matches: u64 = batches.iter().map(|b| b.matching_bits() as u64).sum();
            let mut est = BitCollisionEstimate::from_counts(i, matches, trials, level)?;
            if mode == PoolingMode::PerBit {
                let bit_level = level / n as f64;
                let per_bit_trials: u64 = batches.iter().map(|b| b.k() as u64).sum();
                for bit in 0..n {
                    let m: u64 = batches.iter().map(|b| b.matches_at(bit) as u64).sum();
                    est.lower_bits.push(one_sided_binomial_bound(
                        m,
                        per_bit_trials,
                        bit_level,
                        Side::Lower,
                    )?);
                    est.upper_bits.push(one_sided_binomial_bound(
                        m,
                        per_bit_trials,
                        bit_level,
                        Side::Upper,
                    )?);
                }
            }
            Ok(est)
        })
        .collect()
}

fn check_coverage(estimates: &[BitCollisionEstimate], what: &str) -> Result<()> {
    let mut seen = vec![false; estimates.len()];
    for e in estimates {
        match seen.get_mut(e.trigger_id) {
            Some(s) if !*s => *s = true,
            _ => {
                return Err(invalid(format!(
                    "{what} estimates must cover triggers 0..{} exactly once (trigger {})",
                    estimates.len(),
                    e.trigger_id
                )))
            }
        }
    }
    Ok(())
}

/// `(p_omega, p_xi)`: `P(S_omega < R_bar)` from the lower per-image
/// probabilities of functional copies and `P(S_xi > R_under)` from the upper
/// per-image probabilities of independent models.
pub fn detection_rate_bounds(
    omega: &[BitCollisionEstimate],
    xi: &[BitCollisionEstimate],
    n: usize,
    tau: usize,
    r_bar: usize,
    r_under: usize,
    bridge: BridgeMode,
) -> Result<(f64, f64)> {
    check_coverage(omega, "omega")?;
    check_coverage(xi, "xi")?;
    if omega.len() != xi.len() {
        return Err(invalid(format!(
            "{} omega estimates but {} xi estimates",
            omega.len(),
            xi.len()
        )));
    }
    let big_n = omega.len();
    if !(r_under < r_bar && r_bar <= big_n) {
        return Err(invalid(format!(
            "need R_under < R_bar <= N, got {r_under}, {r_bar}, {big_n}"
        )));
    }
    let lower = omega
        .iter()
        .map(|e| e.detection_probs(n, tau, bridge).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let upper = xi
        .iter()
        .map(|e| e.detection_probs(n, tau, bridge).map(|p| p.1))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        poisson_binomial_cdf(&lower, r_bar, Tail::Below)?,
        poisson_binomial_cdf(&upper, r_under, Tail::Above)?,
    ))
}

/// `sqrt(ln(1/delta) / (2N))`.
pub fn hoeffding_epsilon(delta: f64, big_n: usize) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) || big_n == 0 {
        return Err(invalid(format!(
            "need 0 < delta <= 1 and N >= 1, got {delta}, {big_n}"
        )));
    }
    Ok(((1.0 / delta).ln() / (2.0 * big_n as f64)).sqrt())
}

/// `(Np/d)^d (N(1-p)/(N-d))^(N-d)`, an upper bound on `P(S < d)` for any
/// sum of `N` independent Bernoulli variables with mean probability `p`.
///
/// Requires `0 < d <= N p`; equals 1 at `p = d/N` and decreases in `p` above it.
pub fn chernoff_gamma(p: f64, d: usize, big_n: usize) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) || d == 0 || d > big_n {
        return Err(invalid(format!(
            "chernoff_gamma({p}, {d}, {big_n}) outside its domain"
        )));
    }
    let (nf, df) = (big_n as f64, d as f64);
    if p == df / nf {
        return Ok(1.0);
    }
    if df > nf * p {
        return Err(Error::NotApplicable(format!(
            "Chernoff bound needs d < N p, got d = {d}, N p = {}",
            nf * p
        )));
    }
    let head = df * (nf * p / df).ln();
    let rest = nf - df;
    let tail = if rest == 0.0 {
        0.0
    } else if p == 1.0 {
        f64::NEG_INFINITY
    } else {
        rest * (nf * (1.0 - p) / rest).ln()
    };
    Ok((head + tail).exp().min(1.0))
}

/// Upper-tail analogue: bound on `P(S > d)` for mean probability `q < d/N`.
pub fn chernoff_gamma_upper(q: f64, d: usize, big_n: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&q) || d > big_n {
        return Err(invalid(format!(
            "chernoff_gamma_upper({q}, {d}, {big_n}) outside its domain"
        )));
    }
    if d == big_n {
        return Ok(0.0);
    }
    // S > d  <=>  failures < N - d, failures having mean probability 1 - q.
    chernoff_gamma(1.0 - q, big_n - d, big_n)
}

/// `h(p_hat, eps-)`: bound on `P(R < R_bar)` valid with probability `1 - delta`.
pub fn lemma_h_minus(p_hat: f64, delta: f64, r_bar: usize, big_n: usize) -> Result<f64> {
    let eps = hoeffding_epsilon(delta, big_n)?;
    let p = p_hat - eps;
    if !(p > r_bar as f64 / big_n as f64) {
        return Err(Error::NotApplicable(format!(
            "p_hat - eps = {p:.6} does not exceed R_bar / N = {}",
            r_bar as f64 / big_n as f64
        )));
    }
    chernoff_gamma(p, r_bar, big_n)
}

/// `h(q_hat, eps+)`: bound on `P(R > R_under)` valid with probability `1 - delta`.
pub fn lemma_h_plus(q_hat: f64, delta: f64, r_under: usize, big_n: usize) -> Result<f64> {
    let eps = hoeffding_epsilon(delta, big_n)?;
    let q = q_hat + eps;
    if !(q < r_under as f64 / big_n as f64) {
        return Err(Error::NotApplicable(format!(
            "q_hat + eps = {q:.6} is not below R_under / N = {}",
            r_under as f64 / big_n as f64
        )));
    }
    chernoff_gamma_upper(q, r_under, big_n)
}

/// Both lemma bounds; an inapplicable side is `None` with its reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaBounds {
    pub epsilon: f64,
    pub h_minus: Option<f64>,
    pub h_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_applicable: Vec<String>,
}

pub fn lemma_bounds(
    p_hat: f64,
    q_hat: f64,
    delta: f64,
    r_bar: usize,
    r_under: usize,
    big_n: usize,
) -> Result<LemmaBounds> {
    let epsilon = hoeffding_epsilon(delta, big_n)?;
    let mut not_applicable = Vec::new();
    let mut keep = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NotApplicable(why)) => {
            not_applicable.push(why);
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let h_minus = keep(lemma_h_minus(p_hat, delta, r_bar, big_n))?;
    let h_plus = keep(lemma_h_plus(q_hat, delta, r_under, big_n))?;
    Ok(LemmaBounds {
        epsilon,
        h_minus,
        h_plus,
        not_applicable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub alpha: f64,
    pub delta: f64,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub n: usize,
    pub tau: usize,
    #[serde(rename = "R_bar")]
    pub r_bar: usize,
    #[serde(rename = "R_under")]
    pub r_under: usize,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub p_omega: f64,
    pub p_xi: f64,
    pub p_hat: f64,
    pub q_hat: f64,
    pub h_minus: Option<f64>,
    pub h_plus: Option<f64>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_applicable: Vec<String>,
}

/// Inputs shared by the bound computations of one report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub alpha: f64,
    pub delta: f64,
    pub n: usize,
    pub tau: usize,
    pub r_bar: usize,
    pub r_under: usize,
    pub bridge: BridgeMode,
}

impl BoundReport {
    /// Assembles the report from estimates and observed rates `p_hat`
    /// (functional copies) and `q_hat` (independent models).
    pub fn build(
        settings: &BoundSettings,
        omega: &[BitCollisionEstimate],
        xi: &[BitCollisionEstimate],
        p_hat: f64,
        q_hat: f64,
    ) -> Result<Self> {
        let s = settings;
        let (p_omega, p_xi) =
            detection_rate_bounds(omega, xi, s.n, s.tau, s.r_bar, s.r_under, s.bridge)?;
        let big_n = omega.len();
        let lemma = lemma_bounds(p_hat, q_hat, s.delta, s.r_bar, s.r_under, big_n)?;
        let mut l = vec![0.0; big_n];
        let mut u = vec![0.0; big_n];
        omega.iter().for_each(|e| l[e.trigger_id] = e.lower_l);
        xi.iter().for_each(|e| u[e.trigger_id] = e.upper_u);
        Ok(Self {
            alpha: s.alpha,
            delta: s.delta,
            big_n,
            n: s.n,
            tau: s.tau,
            r_bar: s.r_bar,
            r_under: s.r_under,
            l,
            u,
            p_omega,
            p_xi,
            p_hat,
            q_hat,
            h_minus: lemma.h_minus,
            h_plus: lemma.h_plus,
            epsilon: lemma.epsilon,
            not_applicable: lemma.not_applicable,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
