use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::loss::{evaluate_batch, DrawBatch};
use super::trigger::TriggerSet;
use crate::error::{invalid, Error, Result};
use crate::nn::{AdamConfig, OptimizerState};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

/// Per-epoch training statistics (means per trigger).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub fidelity: f64,
    pub message: f64,
    pub total: f64,
    pub bit_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,fidelity,message,total,bit_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.6}\n",
                e.epoch, e.fidelity, e.message, e.total, e.bit_accuracy
            ));
        }
        out
    }
}

/// Embedding aborted on a non-finite loss or gradient.
#[derive(Debug)]
pub struct EmbedFailure<T> {
    pub error: Error,
    /// Bundle at the end of the last finite epoch.
    pub last_good: Box<ModelBundle<T>>,
    pub log: TrainingLog,
}

impl<T> From<EmbedFailure<T>> for Error {
    fn from(f: EmbedFailure<T>) -> Self {
        f.error
    }
}

fn check_compatible<T: Scalar>(bundle: &ModelBundle<T>, triggers: &TriggerSet) -> Result<()> {
    bundle.validate()?;
    if triggers.input_dim() != bundle.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "trigger image vs bundle input",
            expected: bundle.input_dim(),
            actual: triggers.input_dim(),
        });
    }
    if triggers.message_len() != bundle.message_len() {
        return Err(Error::DimensionMismatch {
            context: "trigger message vs bundle",
            expected: bundle.message_len(),
            actual: triggers.message_len(),
        });
    }
    let h = &bundle.hyper;
    if h.k_train == 0 || h.batch_size == 0 {
        return Err(invalid("k_train and batch_size must be positive"));
    }
    if !(h.lambda >= 0.0) || !(h.learning_rate > 0.0) {
        return Err(invalid("lambda must be >= 0 and learning rate > 0"));
    }
    Ok(())
}

/// Jointly trains `f~`, `e` and `d`; `frozen_f` is never modified.
///
/// Each epoch visits the triggers in a seeded random order in minibatches of
/// `hyper.batch_size`, with `hyper.k_train` fresh noise draws per trigger.
pub fn embed_watermark<T: Scalar>(
    bundle: ModelBundle<T>,
    triggers: &TriggerSet,
) -> Result<(ModelBundle<T>, TrainingLog), EmbedFailure<T>> {
    let mut log = TrainingLog::default();
    if let Err(error) = check_compatible(&bundle, triggers) {
        return Err(EmbedFailure {
            error,
            last_good: Box::new(bundle),
            log,
        });
    }
    let hyper = bundle.hyper.clone();
    let adam = AdamConfig {
        weight_decay: hyper.weight_decay,
        ..AdamConfig::with_lr(hyper.learning_rate)
    };
    let mut opt_f = OptimizerState::new(&bundle.watermarked_f, adam);
    let mut opt_e = OptimizerState::new(&bundle.encoder.net, adam);
    let mut opt_d = OptimizerState::new(&bundle.decoder.net, adam);

    let mut current = bundle;
    let mut last_good = current.clone();
    let samples = triggers.samples();
    let n_triggers = samples.len() as f64;

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(hyper.seed, &[0x5EED, epoch as u64]));
        let (mut fid, mut msg, mut total, mut hits, mut bits) = (0.0, 0.0, 0.0, 0usize, 0usize);

        let step = (|| -> Result<()> {
            for chunk in order.chunks(hyper.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        let seed = derive_seed(hyper.seed, &[epoch as u64, i as u64]);
                        DrawBatch::sampled(&samples[i], hyper.k_train, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let eval = evaluate_batch(&current, &batch)?;
                if !eval.terms.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss became {}", eval.terms.total),
                    });
                }
                if let Some((layer, index)) = eval.grads.first_non_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite gradient at layer {layer}, index {index}"),
                    });
                }
                fid += eval.terms.fidelity;
                msg += eval.terms.message / hyper.k_train as f64;
                total += eval.terms.total;
                hits += eval.matching_bits;
                bits += eval.total_bits;
                opt_f.step(&mut current.watermarked_f, &eval.grads.backbone)?;
                opt_e.step(&mut current.encoder.net, &eval.grads.encoder)?;
                opt_d.step(&mut current.decoder.net, &eval.grads.decoder)?;
            }
            Ok(())
        })();

        if let Err(error) = step {
            return Err(EmbedFailure {
                error,
                last_good: Box::new(last_good),
                log,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            fidelity: fid / n_triggers,
            message: msg / n_triggers,
            total: total / n_triggers,
            bit_accuracy: hits as f64 / bits as f64,
        });
        log::debug!(
            "epoch {epoch}: fidelity {:.4e} message {:.4e} bit acc {:.4}",
            fid / n_triggers,
            msg / n_triggers,
            hits as f64 / bits as f64
        );
        last_good.clone_from(&current);
    }
    Ok((current, log))
}
