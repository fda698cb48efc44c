//! Desk-scale fixture shared by integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use randmark::harness::pipeline::{build_triggers, pretrain_backbone, train_bundle};
use randmark::harness::ExperimentConfig;
use randmark::nn::checkpoint::fingerprint;
use randmark::watermark::{TrainingLog, TriggerSet};
use randmark::{Bundle, Mlp};

pub struct Desk {
    pub config: ExperimentConfig,
    pub triggers: TriggerSet,
    /// Backbone before embedding.
    pub original: Mlp,
    pub original_hash: String,
    pub bundle: Bundle,
    pub log: TrainingLog,
}

/// Trains the default configuration once per test binary.
pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = ExperimentConfig::default();
        let triggers = build_triggers(&config).expect("triggers");
        let original = pretrain_backbone(&config).expect("pretraining");
        let original_hash = fingerprint(&original);
        let (bundle, log) = train_bundle(&config, original.clone(), &triggers).expect("embedding");
        Desk {
            config,
            triggers,
            original,
            original_hash,
            bundle,
            log,
        }
    })
}

/// Small configuration that trains in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let text = "\
[model]
s = 64
k = 16
n = 8
backbone_hidden = 32
[data]
triggers = 20
heldout = 50
[embed]
epochs = 40
encoder_hidden = 32
decoder_hidden = 16
[pretrain]
images = 100
epochs = 2
[verify]
k = 16
tau = 1
[bounds]
r_bar = 15
r_under = 10
[population]
m = 4
heldout = 50
[baselines]
independents = 2
covariance_pairs = 3
";
    text.parse().expect("tiny config parses")
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
