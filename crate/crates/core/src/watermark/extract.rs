use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{Decoder, Encoder, ModelBundle};
use super::message::BitMessage;
use super::trigger::{TriggerSample, TriggerSet};
use crate::error::{invalid, Error, Result};
use crate::nn::{Matrix, MlpNetwork};
use crate::rng::trigger_stream_seed;
use crate::scalar::Scalar;

/// `K` extracted messages for one trigger under seeded noise draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionBatch {
    /// `K x n` decoder outputs in (0,1).
    pub soft_bits: Vec<Vec<f64>>,
    pub hard_messages: Vec<BitMessage>,
    /// `d_j = hamming(m, m'_j)`.
    pub distances: Vec<usize>,
    pub noise_seed: u64,
    /// The embedded message the distances refer to.
    pub message: BitMessage,
}

impl ExtractionBatch {
    pub fn k(&self) -> usize {
        self.distances.len()
    }

    pub fn message_len(&self) -> usize {
        self.message.len()
    }

    /// Builds a batch from hard messages, recomputing the distances.
    pub fn from_messages(
        message: BitMessage,
        hard_messages: Vec<BitMessage>,
        noise_seed: u64,
    ) -> Result<Self> {
        if hard_messages.is_empty() {
            return Err(invalid("extraction batch needs at least one draw"));
        }
        let distances = hard_messages
            .iter()
            .map(|h| message.hamming(h))
            .collect::<Result<Vec<_>>>()?;
        let soft_bits = hard_messages.iter().map(BitMessage::to_f64).collect();
        Ok(Self {
            soft_bits,
            hard_messages,
            distances,
            noise_seed,
            message,
        })
    }

    /// Bit matches over all draws: `K*n - sum_j d_j`.
    pub fn matching_bits(&self) -> usize {
        self.k() * self.message_len() - self.distances.iter().sum::<usize>()
    }

    /// Number of draws in which bit `i` was recovered correctly.
    pub fn matches_at(&self, i: usize) -> usize {
        let target = self.message.get(i);
        self.hard_messages
            .iter()
            .filter(|m| m.get(i) == target)
            .count()
    }
}

fn check_suspect<T: Scalar>(
    suspect: &MlpNetwork<T>,
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
) -> Result<()> {
    if suspect.input_dim() != encoder.image_dim() || suspect.output_dim() != decoder.embedding_dim()
    {
        return Err(Error::IncompatibleSuspect(format!(
            "suspect maps {} -> {}, verifier expects {} -> {}",
            suspect.input_dim(),
            suspect.output_dim(),
            encoder.image_dim(),
            decoder.embedding_dim()
        )));
    }
    Ok(())
}

/// `m'_j = d(h(e(x + eps_j, m)))` for `K` fresh draws from `stream_seed`.
pub fn extract_messages<T: Scalar>(
    suspect: &MlpNetwork<T>,
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    sample: &TriggerSample,
    k: usize,
    stream_seed: u64,
) -> Result<ExtractionBatch> {
    check_suspect(suspect, encoder, decoder)?;
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if sample.image().len() != encoder.image_dim()
        || sample.message().len() != decoder.message_len()
    {
        return Err(Error::DimensionMismatch {
            context: "trigger vs verifier networks",
            expected: encoder.image_dim(),
            actual: sample.image().len(),
        });
    }
    let draws = sample.sample_noise(k, stream_seed);
    let rows: Vec<Vec<T>> = draws
        .iter()
        .map(|d| d.iter().map(|&v| T::from_f64_lossy(v)).collect())
        .collect();
    let noisy = Matrix::from_rows(&rows)?;
    let stego = encoder.encode_batch(&noisy, sample.message())?.stego;
    let embedding = suspect.predict_batch(&stego)?;
    let soft = decoder.net.predict_batch(&embedding)?;

    let mut soft_bits = Vec::with_capacity(k);
    let mut hard_messages = Vec::with_capacity(k);
    let mut distances = Vec::with_capacity(k);
    for row in soft.row_iter() {
        let s: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let hard = BitMessage::from_soft(&s)?;
        distances.push(sample.message().hamming(&hard)?);
        soft_bits.push(s);
        hard_messages.push(hard);
    }
    Ok(ExtractionBatch {
        soft_bits,
        hard_messages,
        distances,
        noise_seed: stream_seed,
        message: sample.message().clone(),
    })
}

/// Extracts from every trigger with stream seed `seed XOR index`, in parallel.
pub fn extract_all<T: Scalar>(
    suspect: &MlpNetwork<T>,
    bundle: &ModelBundle<T>,
    triggers: &TriggerSet,
    k: usize,
    seed: u64,
) -> Result<Vec<ExtractionBatch>> {
    check_suspect(suspect, &bundle.encoder, &bundle.decoder)?;
    triggers
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            extract_messages(
                suspect,
                &bundle.encoder,
                &bundle.decoder,
                sample,
                k,
                trigger_stream_seed(seed, i),
            )
        })
        .collect()
}
