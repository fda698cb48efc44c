//! Embedding objective and its gradients.
//!
//! Per trigger `x` with noise draws `x + eps_j`, `j = 1..K`:
//!
//! ```text
//! L = ||f(x) - f~(x)||_2 + (lambda / K) * sum_j ||m - d(f~(e(x + eps_j, m)))||_2^2
//! ```
//!
//! The message term uses the decoder's soft (sigmoid) outputs; hard bits are
//! only taken at extraction time.

use super::bundle::ModelBundle;
use super::message::BitMessage;
use super::trigger::TriggerSample;
use crate::error::{invalid, Result};
use crate::nn::{Gradients, Matrix};
use crate::scalar::Scalar;

/// Values of the two objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// `fidelity + sum_i (lambda / K_i) * message_i`.
    pub total: f64,
    /// Sum over triggers of `||f(x) - f~(x)||_2`.
    pub fidelity: f64,
    /// Sum over triggers and draws of `||m - m'_j||_2^2`, before the
    /// `lambda / K` weight.
    pub message: f64,
}

/// Gradients for the three trained networks.
#[derive(Clone, Debug)]
pub struct BundleGradients<T> {
    pub backbone: Gradients<T>,
    pub encoder: Gradients<T>,
    pub decoder: Gradients<T>,
}

impl<T: Scalar> BundleGradients<T> {
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.backbone
            .first_non_finite()
            .or_else(|| self.encoder.first_non_finite())
            .or_else(|| self.decoder.first_non_finite())
    }
}

/// One trigger with its noisy copies (one per row).
pub struct DrawBatch<'a, T> {
    pub sample: &'a TriggerSample,
    pub noisy: Matrix<T>,
}

impl<'a, T: Scalar> DrawBatch<'a, T> {
    pub fn from_draws(sample: &'a TriggerSample, draws: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<T>> = draws
            .iter()
            .map(|d| d.iter().map(|&v| T::from_f64_lossy(v)).collect())
            .collect();
        Ok(Self {
            sample,
            noisy: Matrix::from_rows(&rows)?,
        })
    }

    pub fn sampled(sample: &'a TriggerSample, k: usize, stream_seed: u64) -> Result<Self> {
        Self::from_draws(sample, &sample.sample_noise(k, stream_seed))
    }
}

/// Loss, gradients and hard-bit agreement for a minibatch of triggers.
pub struct BatchEvaluation<T> {
    pub terms: LossTerms,
    pub grads: BundleGradients<T>,
    /// Hard bits equal to the embedded bit, over all draws.
    pub matching_bits: usize,
    pub total_bits: usize,
}

fn to_row<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

/// Evaluates the summed objective over `batch` and back-propagates it.
pub fn evaluate_batch<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &[DrawBatch<'_, T>],
) -> Result<BatchEvaluation<T>> {
    if batch.is_empty() {
        return Err(invalid("empty minibatch"));
    }
    if let Some(b) = batch.iter().find(|b| b.noisy.rows() == 0) {
        return Err(invalid(format!(
            "trigger with message {} has no noise draws",
            b.sample.message()
        )));
    }
    let lambda = T::from_f64_lossy(bundle.hyper.lambda);
    let two = T::one() + T::one();

    // Fidelity on clean images.
    let clean_rows: Vec<Vec<T>> = batch.iter().map(|b| to_row(b.sample.image())).collect();
    let clean = Matrix::from_rows(&clean_rows)?;
    let reference = bundle.frozen_f.predict_batch(&clean)?;
    let (current, fid_trace) = bundle.watermarked_f.forward_batch(&clean)?;
    let mut fid_grad = Matrix::zeros(current.rows(), current.cols());
    let mut fidelity = T::zero();
    for i in 0..current.rows() {
        let diff: Vec<T> = current
            .row(i)
            .iter()
            .zip(reference.row(i))
            .map(|(&a, &b)| a - b)
            .collect();
        let norm = diff.iter().map(|&d| d * d).sum::<T>().sqrt();
        fidelity += norm;
        if norm > T::zero() {
            for (g, d) in fid_grad.row_mut(i).iter_mut().zip(diff) {
                *g = d / norm;
            }
        }
    }

    // Message term on encoded noisy copies, all triggers stacked.
    let s = bundle.input_dim();
    let total_rows: usize = batch.iter().map(|b| b.noisy.rows()).sum();
    let mut noisy = Matrix::zeros(total_rows, s);
    let mut messages: Vec<&BitMessage> = Vec::with_capacity(total_rows);
    let mut weights: Vec<T> = Vec::with_capacity(total_rows);
    let mut r = 0;
    for b in batch {
        let k = b.noisy.rows();
        for j in 0..k {
            noisy.row_mut(r).copy_from_slice(b.noisy.row(j));
            messages.push(b.sample.message());
            weights.push(lambda / T::from_usize(k).expect("usize fits"));
            r += 1;
        }
    }
    let encoded = bundle.encoder.encode_rows(&noisy, &messages)?;
    let (embedding, backbone_trace) = bundle.watermarked_f.forward_batch(&encoded.stego)?;
    let (soft, decoder_trace) = bundle.decoder.net.forward_batch(&embedding)?;

    let mut soft_grad = Matrix::zeros(soft.rows(), soft.cols());
    let mut message_raw = T::zero();
    let mut weighted = T::zero();
    let mut matching_bits = 0;
    for row in 0..soft.rows() {
        let target = messages[row];
        let mut sq = T::zero();
        for (c, (&p, g)) in soft.row(row).iter().zip(soft_grad.row_mut(row)).enumerate() {
            let t = if target.get(c) { T::one() } else { T::zero() };
            let e = p - t;
            sq += e * e;
            *g = weights[row] * two * e;
            if (p >= T::from_f64_lossy(0.5)) == target.get(c) {
                matching_bits += 1;
            }
        }
        message_raw += sq;
        weighted += weights[row] * sq;
    }

    let dec_bp = bundle.decoder.net.backward(&decoder_trace, &soft_grad)?;
    let bb_bp = bundle
        .watermarked_f
        .backward(&backbone_trace, &dec_bp.input_grad)?;
    let mut residual_grad = bb_bp.input_grad;
    residual_grad.scale(bundle.encoder.scale);
    let enc_bp = bundle
        .encoder
        .net
        .backward(&encoded.trace, &residual_grad)?;
    let fid_bp = bundle.watermarked_f.backward(&fid_trace, &fid_grad)?;

    let mut backbone = bb_bp.grads;
    backbone.add_assign(&fid_bp.grads);

    Ok(BatchEvaluation {
        terms: LossTerms {
            total: (fidelity + weighted).to_f64_lossy(),
            fidelity: fidelity.to_f64_lossy(),
            message: message_raw.to_f64_lossy(),
        },
        grads: BundleGradients {
            backbone,
            encoder: enc_bp.grads,
            decoder: dec_bp.grads,
        },
        matching_bits,
        total_bits: soft.rows() * soft.cols(),
    })
}

/// Objective for one trigger under `K` draws from `stream_seed`.
pub fn compute_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    sample: &TriggerSample,
    k: usize,
    stream_seed: u64,
) -> Result<LossTerms> {
    let batch = [DrawBatch::sampled(sample, k, stream_seed)?];
    Ok(evaluate_batch(bundle, &batch)?.terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, Activation, MlpNetwork, MlpSpec};
    use crate::watermark::{AuxArch, EmbedConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_bundle(seed: u64, lambda: f64) -> ModelBundle<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::uniform(9, &[7], 4, Activation::Tanh, Activation::Identity);
        let f = MlpNetwork::random(&spec, &mut rng);
        let arch = AuxArch {
            encoder_hidden: vec![6],
            decoder_hidden: vec![5],
            perturbation_scale: 0.3,
        };
        let hyper = EmbedConfig {
            lambda,
            ..EmbedConfig::default()
        };
        ModelBundle::init(f, 3, &arch, hyper, &mut rng).unwrap()
    }

    fn sample(seed: u64) -> TriggerSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..9)
            .map(|i| (i as f64 * 0.37 + seed as f64).sin().abs())
            .collect();
        TriggerSample::new(image, BitMessage::random(3, &mut rng).unwrap(), 0.05).unwrap()
    }

    #[test]
    fn identical_backbones_and_exact_soft_bits_give_zero_loss() {
        let mut b = small_bundle(1, 1.0);
        let x = sample(2);
        let last = b.decoder.net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        for (v, &bit) in last.bias.iter_mut().zip(x.message().bits()) {
            *v = if bit { 1000.0 } else { -1000.0 };
        }
        let t = compute_loss(&b, &x, 4, 9).unwrap();
        assert_eq!(t, LossTerms::default());
    }

    #[test]
    fn message_contribution_is_linear_in_lambda() {
        let x = sample(3);
        let mut b = small_bundle(4, 1.0);
        b.watermarked_f.params_mut().for_each(|p| *p *= 1.1);
        let one = compute_loss(&b, &x, 5, 11).unwrap();
        b.hyper.lambda = 2.0;
        let two = compute_loss(&b, &x, 5, 11).unwrap();
        assert_eq!(one.fidelity, two.fidelity);
        assert_eq!(one.message, two.message);
        let c1 = one.total - one.fidelity;
        let c2 = two.total - two.fidelity;
        assert!((c2 - 2.0 * c1).abs() < 1e-12 * c2.abs());
        assert!((c1 - one.message / 5.0).abs() < 1e-12);
    }

    fn total_loss(b: &ModelBundle<f64>, batch: &[DrawBatch<'_, f64>]) -> f64 {
        evaluate_batch(b, batch).unwrap().terms.total
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let samples = [sample(5), sample(6)];
        for seed in 0..3 {
            let mut b = small_bundle(10 + seed, 0.7);
            // Move f~ off f so the fidelity norm is differentiable.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ref_flat = b.watermarked_f.flatten();
            let shifted: Vec<f64> = ref_flat
                .iter()
                .map(|&p| p + 0.05 * <f64 as Scalar>::sample_standard_normal(&mut rng))
                .collect();
            b.watermarked_f.set_flat(&shifted).unwrap();
            let batch: Vec<_> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| DrawBatch::sampled(s, 3 + i, 100 + i as u64).unwrap())
                .collect();
            let g = evaluate_batch(&b, &batch).unwrap().grads;

            let err = gradient_check(&b.watermarked_f, &g.backbone, 1e-6, |net| {
                let mut p = b.clone();
                p.watermarked_f = net.clone();
                total_loss(&p, &batch)
            })
            .unwrap();
            assert!(err < 1e-5, "backbone {err}");
            let err = gradient_check(&b.encoder.net, &g.encoder, 1e-6, |net| {
                let mut p = b.clone();
                p.encoder.net = net.clone();
                total_loss(&p, &batch)
            })
            .unwrap();
            assert!(err < 1e-5, "encoder {err}");
            let err = gradient_check(&b.decoder.net, &g.decoder, 1e-6, |net| {
                let mut p = b.clone();
                p.decoder.net = net.clone();
                total_loss(&p, &batch)
            })
            .unwrap();
            assert!(err < 1e-5, "decoder {err}");
        }
    }

    #[test]
    fn batch_loss_is_sum_of_per_trigger_losses() {
        let b = small_bundle(7, 1.3);
        let samples = [sample(8), sample(9), sample(10)];
        let batch: Vec<_> = samples
            .iter()
            .map(|s| DrawBatch::sampled(s, 4, 3).unwrap())
            .collect();
        let joint = evaluate_batch(&b, &batch).unwrap().terms.total;
        let separate: f64 = samples
            .iter()
            .map(|s| compute_loss(&b, s, 4, 3).unwrap().total)
            .sum();
        assert!((joint - separate).abs() < 1e-9);
    }

    #[test]
    fn empty_draws_are_rejected() {
        let b = small_bundle(1, 1.0);
        let x = sample(1);
        assert!(compute_loss(&b, &x, 0, 0).is_err());
    }
}
