//! Extraction statistics, the threshold decision rule and its calibration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::watermark::{BitMessage, ExtractionBatch};

pub fn hamming_distance(m: &BitMessage, m_prime: &BitMessage) -> Result<usize> {
    m.hamming(m_prime)
}

pub fn sample_mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("mean of an empty sample"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Unbiased sample variance; `None` for fewer than two observations.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Some(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Unbiased sample covariance of paired observations.
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "paired samples",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let s: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(Some(s / (k - 1.0)))
}

fn distances_f64(batch: &ExtractionBatch) -> Vec<f64> {
    batch.distances.iter().map(|&d| d as f64).collect()
}

/// `rho(x) = (1/K) sum_j d_j`.
pub fn mean_distance(batch: &ExtractionBatch) -> Result<f64> {
    sample_mean(&distances_f64(batch))
}

/// Unbiased variance of the `d_j`; absent when `K < 2`.
pub fn var_distance(batch: &ExtractionBatch) -> Option<f64> {
    sample_variance(&distances_f64(batch))
}

fn check_paired(a: &ExtractionBatch, b: &ExtractionBatch) -> Result<()> {
    if a.noise_seed != b.noise_seed {
        return Err(Error::Unpaired(format!(
            "noise seeds differ ({} vs {})",
            a.noise_seed, b.noise_seed
        )));
    }
    if a.k() != b.k() || a.message_len() != b.message_len() {
        return Err(Error::Unpaired(format!(
            "batch shapes differ ({}x{} vs {}x{})",
            a.k(),
            a.message_len(),
            b.k(),
            b.message_len()
        )));
    }
    if a.message != b.message {
        return Err(Error::Unpaired(
            "batches refer to different messages".into(),
        ));
    }
    Ok(())
}

/// Variance of `||m'_j(f) - m'_j(h)||_1` over paired draws.
pub fn cross_model_variance(
    batch_f: &ExtractionBatch,
    batch_h: &ExtractionBatch,
) -> Result<Option<f64>> {
    check_paired(batch_f, batch_h)?;
    let cross = batch_f
        .hard_messages
        .iter()
        .zip(&batch_h.hard_messages)
        .map(|(a, b)| a.hamming(b).map(|d| d as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(sample_variance(&cross))
}

/// `(V(X) + V(Y) - V(X - Y)) / 2` for paired distance sequences `X`, `Y`.
pub fn covariance_delta(
    batch_f: &ExtractionBatch,
    batch_g: &ExtractionBatch,
) -> Result<Option<f64>> {
    check_paired(batch_f, batch_g)?;
    Ok(polarized_covariance(
        &distances_f64(batch_f),
        &distances_f64(batch_g),
    ))
}

/// `sum_b |s_jb - m_b|` per draw: the distance before binarization.
pub fn soft_distances(batch: &ExtractionBatch) -> Result<Vec<f64>> {
    let m = batch.message.to_f64();
    if batch.soft_bits.len() != batch.k() {
        return Err(invalid("batch carries no soft decoder outputs"));
    }
    Ok(batch
        .soft_bits
        .iter()
        .map(|row| row.iter().zip(&m).map(|(s, b)| (s - b).abs()).sum())
        .collect())
}

fn polarized_covariance(x: &[f64], y: &[f64]) -> Option<f64> {
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    match (
        sample_variance(x),
        sample_variance(y),
        sample_variance(&diff),
    ) {
        (Some(vx), Some(vy), Some(vd)) => Some((vx + vy - vd) / 2.0),
        _ => None,
    }
}

/// [`covariance_delta`] on [`soft_distances`]. Stays informative when the
/// hard distances of one model do not vary across draws.
pub fn soft_covariance_delta(
    batch_f: &ExtractionBatch,
    batch_g: &ExtractionBatch,
) -> Result<Option<f64>> {
    check_paired(batch_f, batch_g)?;
    Ok(polarized_covariance(
        &soft_distances(batch_f)?,
        &soft_distances(batch_g)?,
    ))
}

/// Suspect is declared watermarked iff `rho <= tau`.
pub fn decide(rho: f64, tau: usize) -> bool {
    rho <= tau as f64
}

/// Fraction of triggers with `rho <= tau`.
pub fn detection_rate(rhos: &[f64], tau: usize) -> Result<f64> {
    if rhos.is_empty() {
        return Err(invalid("detection rate over an empty trigger set"));
    }
    Ok(rhos.iter().filter(|&&r| decide(r, tau)).count() as f64 / rhos.len() as f64)
}

/// Largest `n` handled with exact integer coefficients.
pub const EXACT_BINOMIAL_MAX_N: usize = 64;

fn binomial_u128(n: usize, k: usize) -> u128 {
    // Multiplicative form stays exact: each prefix is itself a binomial coefficient.
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        comp += if sum.abs() >= t.abs() {
            (sum - s) + t
        } else {
            (t - s) + sum
        };
        sum = s;
    }
    sum + comp
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    statrs::function::factorial::ln_binomial(n as u64, k as u64)
}

/// Binomial cumulative mass of the mismatch count: `P(J <= j)` for every
/// `j = 0..=tau`, where `J ~ Bin(n, 1 - r)`.
fn mismatch_cdf(r: f64, n: usize, tau: usize) -> Vec<f64> {
    let q = 1.0 - r;
    let upto = tau.min(n);
    if n <= EXACT_BINOMIAL_MAX_N {
        let terms: Vec<f64> = (0..=upto)
            .map(|j| binomial_u128(n, j) as f64 * q.powi(j as i32) * r.powi((n - j) as i32))
            .collect();
        (0..=upto)
            .map(|j| compensated_sum(terms[..=j].iter().copied()).min(1.0))
            .collect()
    } else {
        let (lr, lq) = (r.ln(), q.ln());
        let logs: Vec<f64> = (0..=upto)
            .map(|j| {
                let a = if j == 0 { 0.0 } else { j as f64 * lq };
                let b = if j == n { 0.0 } else { (n - j) as f64 * lr };
                ln_binomial(n, j) + a + b
            })
            .collect();
        let mut out = Vec::with_capacity(upto + 1);
        for j in 0..=upto {
            let m = logs[..=j].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = if m == f64::NEG_INFINITY {
                0.0
            } else {
                m.exp() * compensated_sum(logs[..=j].iter().map(|&l| (l - m).exp()))
            };
            out.push(v.min(1.0));
        }
        out
    }
}

fn check_rate(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid(format!("match probability {r} outside [0, 1]")));
    }
    Ok(())
}

/// `sum_{j=0}^{tau} C(n,j) (1-r)^j r^(n-j)`: probability that a message with
/// i.i.d. per-bit match probability `r` has at most `tau` mismatches.
pub fn fpr_binomial(r: f64, n: usize, tau: usize) -> Result<f64> {
    check_rate(r)?;
    if n == 0 {
        return Err(invalid("message length must be positive"));
    }
    if tau >= n {
        return Ok(1.0);
    }
    Ok(*mismatch_cdf(r, n, tau).last().expect("tau + 1 entries"))
}

/// Largest `tau < n` with `fpr_binomial(r, n, tau) < epsilon`, or `None` if
/// even `tau = 0` is too permissive.
pub fn select_threshold(r: f64, n: usize, epsilon: f64) -> Result<Option<usize>> {
    check_rate(r)?;
    if n == 0 {
        return Err(invalid("message length must be positive"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(invalid(format!(
            "false-positive bound {epsilon} outside (0, 1]"
        )));
    }
    let cdf = mismatch_cdf(r, n, n - 1);
    Ok(cdf
        .iter()
        .take_while(|&&p| p < epsilon)
        .count()
        .checked_sub(1))
}

/// Decision parameters for verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub n: usize,
    pub tau: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon_fpr: f64,
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(invalid("n and K must be positive"));
        }
        if self.tau > self.n {
            return Err(invalid(format!("tau {} exceeds n {}", self.tau, self.n)));
        }
        if !(self.epsilon_fpr > 0.0 && self.epsilon_fpr < 1.0) {
            return Err(invalid("epsilon_fpr must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suspect_id: String,
    pub n: usize,
    pub tau: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub rho: Vec<f64>,
    pub detection_rate: f64,
    /// Per-trigger variance; `null` when `K < 2`.
    pub variance: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<Option<f64>>>,
    pub decision_per_trigger: Vec<bool>,
}

impl VerificationReport {
    /// Summarizes per-trigger batches; `reference`, if given, must be paired
    /// with `batches` trigger by trigger and yields the covariance deltas.
    pub fn from_batches(
        suspect_id: impl Into<String>,
        batches: &[ExtractionBatch],
        tau: usize,
        seed: u64,
        reference: Option<&[ExtractionBatch]>,
    ) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| invalid("no extraction batches"))?;
        let rho = batches
            .iter()
            .map(mean_distance)
            .collect::<Result<Vec<_>>>()?;
        let delta = match reference {
            Some(r) if r.len() != batches.len() => {
                return Err(Error::Unpaired(format!(
                    "{} reference batches for {} triggers",
                    r.len(),
                    batches.len()
                )))
            }
            Some(r) => Some(
                r.iter()
                    .zip(batches)
                    .map(|(a, b)| covariance_delta(a, b))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            suspect_id: suspect_id.into(),
            n: first.message_len(),
            tau,
            k: first.k(),
            seed,
            detection_rate: detection_rate(&rho, tau)?,
            variance: batches.iter().map(var_distance).collect(),
            decision_per_trigger: rho.iter().map(|&r| decide(r, tau)).collect(),
            rho,
            delta,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One point of a detection-rate curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub suspect_id: String,
    pub kind: String,
    pub tau: usize,
    pub detection_rate: f64,
}

/// `R(tau)` for `tau = 0..=n` from one set of per-trigger `rho` values.
pub fn detection_rate_sweep(
    suspect_id: &str,
    kind: &str,
    rhos: &[f64],
    n: usize,
) -> Result<Vec<SweepRow>> {
    (0..=n)
        .map(|tau| {
            Ok(SweepRow {
                suspect_id: suspect_id.to_string(),
                kind: kind.to_string(),
                tau,
                detection_rate: detection_rate(rhos, tau)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("suspect_id,kind,tau,R\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.suspect_id, r.kind, r.tau, r.detection_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(distances: &[usize], seed: u64) -> ExtractionBatch {
        let n = 8;
        let m = BitMessage::new(vec![0; n]).unwrap();
        let hard = distances
            .iter()
            .map(|&d| BitMessage::from_bools((0..n).map(|i| i < d).collect()).unwrap())
            .collect();
        ExtractionBatch::from_messages(m, hard, seed).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let a = BitMessage::new(vec![1, 0, 1, 0]).unwrap();
        let b = BitMessage::new(vec![0, 0, 1, 1]).unwrap();
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        assert_eq!(hamming_distance(&a, &b).unwrap(), 2);
        assert_eq!(hamming_distance(&a, &a.complement()).unwrap(), 4);
        assert!(hamming_distance(&a, &BitMessage::new(vec![1]).unwrap()).is_err());
    }

    #[test]
    fn mean_and_variance_examples() {
        assert_eq!(mean_distance(&batch(&[0, 0, 0], 1)).unwrap(), 0.0);
        let b = batch(&[2, 4], 1);
        assert_eq!(mean_distance(&b).unwrap(), 3.0);
        assert_eq!(var_distance(&b), Some(2.0));
        assert_eq!(var_distance(&batch(&[3, 3, 3], 1)), Some(0.0));
        assert_eq!(var_distance(&batch(&[3], 1)), None);
    }

    #[test]
    fn cross_variance_examples() {
        let b = batch(&[1, 5, 2], 4);
        assert_eq!(cross_model_variance(&b, &b).unwrap(), Some(0.0));
        let zero = batch(&[0, 0, 0], 4);
        let other = batch(&[0, 2, 4], 4);
        assert_eq!(cross_model_variance(&zero, &other).unwrap(), Some(4.0));
        assert!(matches!(
            cross_model_variance(&zero, &batch(&[0, 2, 4], 5)),
            Err(Error::Unpaired(_))
        ));
    }

    #[test]
    fn delta_examples() {
        let x = batch(&[1, 2, 3], 0);
        let y = batch(&[3, 2, 1], 0);
        assert!((covariance_delta(&x, &y).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(covariance_delta(&x, &x).unwrap(), var_distance(&x));
    }

    #[test]
    fn decision_and_rate_examples() {
        assert!(decide(0.0, 0));
        assert!(!decide(5.2, 5));
        assert!(decide(5.0, 5));
        assert_eq!(detection_rate(&[0.0; 4], 0).unwrap(), 1.0);
        assert!((detection_rate(&[0.0, 3.0, 10.0], 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(detection_rate(&[], 5).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_binomial(0.3, 32, 32).unwrap(), 1.0);
        assert_eq!(fpr_binomial(1.0, 32, 0).unwrap(), 1.0);
        assert_eq!(fpr_binomial(0.0, 32, 31).unwrap(), 0.0);
        let v = fpr_binomial(0.5, 32, 5).unwrap();
        assert!((v - 242825.0 / 4294967296.0).abs() < 1e-12 * v);
        assert!(fpr_binomial(1.5, 32, 5).is_err());
    }

    #[test]
    fn log_domain_path_agrees_with_exact_path_at_the_boundary() {
        for &(r, tau) in &[(0.5, 20usize), (0.9, 3), (0.3, 40)] {
            let exact = mismatch_cdf(r, 64, tau);
            let logd = {
                let (lr, lq) = (f64::ln(r), f64::ln(1.0 - r));
                let terms: Vec<f64> = (0..=tau)
                    .map(|j| (ln_binomial(64, j) + j as f64 * lq + (64 - j) as f64 * lr).exp())
                    .collect();
                terms.iter().sum::<f64>()
            };
            let e = *exact.last().unwrap();
            assert!((e - logd).abs() <= 1e-10 * e, "{r} {tau}: {e} vs {logd}");
        }
        let big = fpr_binomial(0.5, 200, 100).unwrap();
        assert!((big - 0.528_174).abs() < 1e-5, "{big}");
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(0.5, 32, 1e-4).unwrap(), Some(5));
        assert_eq!(select_threshold(0.5, 32, 1.0).unwrap(), Some(31));
        assert_eq!(select_threshold(0.5, 32, 1e-12).unwrap(), None);
        assert_eq!(select_threshold(1.0, 32, 0.5).unwrap(), None);
    }

    #[test]
    fn sweep_is_monotone_and_covers_all_thresholds() {
        let rows = detection_rate_sweep("s", "wm", &[0.5, 3.0, 7.5, 20.0], 32).unwrap();
        assert_eq!(rows.len(), 33);
        assert!(rows
            .windows(2)
            .all(|w| w[0].detection_rate <= w[1].detection_rate));
        let csv = sweep_csv(&rows[..2]);
        assert_eq!(csv, "suspect_id,kind,tau,R\ns,wm,0,0\ns,wm,1,0.25\n");
    }

    #[test]
    fn report_json_has_expected_fields() {
        let b = [batch(&[0, 1], 3), batch(&[6], 4)];
        let r = VerificationReport::from_batches("h", &b[..1], 5, 3, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in [
            "suspect_id",
            "n",
            "tau",
            "K",
            "seed",
            "rho",
            "detection_rate",
            "variance",
            "decision_per_trigger",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("delta").is_none());
        let single = VerificationReport::from_batches("h", &b[1..], 5, 4, None).unwrap();
        assert_eq!(single.variance, vec![None]);
        assert_eq!(single.decision_per_trigger, vec![false]);
    }
}
