//! Message embedding into trigger representations and extraction from
//! suspect backbones.

mod bundle;
mod embed;
mod extract;
mod loss;
mod message;
mod trigger;

pub use bundle::{AuxArch, Decoder, EmbedConfig, EncodedBatch, Encoder, ModelBundle};
pub use embed::{embed_watermark, EmbedFailure, EpochLog, TrainingLog};
pub use extract::{extract_all, extract_messages, ExtractionBatch};
pub use loss::{
    compute_loss, evaluate_batch, BatchEvaluation, BundleGradients, DrawBatch, LossTerms,
};
pub use message::BitMessage;
pub use trigger::{sample_noise, TriggerSample, TriggerSet};
