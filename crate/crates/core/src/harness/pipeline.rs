//! End-to-end experiment: data, pretraining, embedding, attacks, model
//! populations, verification, covariance diagnostic and bounds.
//!
//! Outputs land in one run directory:
//!
//! | file | content |
//! |---|---|
//! | `config.ini` | config snapshot |
//! | `triggers.rmts`, `bundle/` | trigger set and trained bundle |
//! | `training_log.csv` | per-epoch embedding losses |
//! | `sweep.csv` | `suspect_id,kind,tau,R` for `tau = 0..=n` |
//! | `covariance.csv`, `covariance_soft.csv` | `pair_id,kind,trigger_id,delta` on hard and soft distances |
//! | `reports/<suspect>.json` | verification reports |
//! | `bounds.json`, `summary.json` | bound report and headline numbers |
//! | `run_manifest.json` | checksums and stage timings |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{build_trigger_set, gen_synthetic_images};
use super::manifest::{collect_files, RunManifest, StageRecord, StageStatus};
use super::persistence::{save_bundle, save_population};
use crate::attacks::{
    apply_attack, make_independent, sample_model_population, PopulationKind, PopulationMember,
};
use crate::bounds::{estimate_bit_collisions, BoundReport, BoundSettings};
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, MlpNetwork, MlpSpec};
use crate::rng::{derive_seed, stream};
use crate::stats::{
    covariance_delta, detection_rate, detection_rate_sweep, mean_distance, select_threshold,
    soft_covariance_delta, sweep_csv, SweepRow, VerificationReport,
};
use crate::watermark::{
    embed_watermark, extract_all, EmbedConfig, ExtractionBatch, ModelBundle, TrainingLog,
    TriggerSet,
};

pub const STAGES: [&str; 9] = [
    "data",
    "pretrain",
    "embed",
    "attacks",
    "population",
    "verify",
    "covariance",
    "bounds",
    "report",
];

/// Seeds of the pipeline's random streams, all derived from `config.seed`.
#[derive(Clone, Copy, Debug)]
pub struct RunSeeds {
    pub images: u64,
    pub messages: u64,
    pub backbone: u64,
    pub pretrain_data: u64,
    pub aux_init: u64,
    pub embed: u64,
    pub heldout: u64,
    pub omega: u64,
    pub xi: u64,
    pub verify: u64,
}

impl RunSeeds {
    pub fn from_master(seed: u64) -> Self {
        let d = |i: u64| derive_seed(seed, &[0xA11, i]);
        Self {
            images: d(1),
            messages: d(2),
            backbone: d(3),
            pretrain_data: d(4),
            aux_init: d(5),
            embed: d(6),
            heldout: d(7),
            omega: d(8),
            xi: d(9),
            verify: d(10),
        }
    }
}

/// Trigger set of the run: `cfg.triggers` synthetic images with random messages.
pub fn build_triggers(cfg: &ExperimentConfig) -> Result<TriggerSet> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let images = gen_synthetic_images(cfg.triggers, cfg.s, seeds.images)?;
    build_trigger_set(images, cfg.n, cfg.sigma_scale, seeds.messages)
}

/// The original backbone `f`, pretrained by masked reconstruction.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<MlpNetwork<f64>> {
    let seeds = RunSeeds::from_master(cfg.seed);
    make_independent::<f64>(
        &backbone_spec(cfg),
        seeds.backbone,
        seeds.pretrain_data,
        &cfg.pretrain,
    )
}

/// Fresh encoder/decoder around `f`, then watermark embedding.
pub fn train_bundle(
    cfg: &ExperimentConfig,
    f: MlpNetwork<f64>,
    triggers: &TriggerSet,
) -> Result<(ModelBundle<f64>, TrainingLog)> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let hyper = EmbedConfig {
        seed: seeds.embed,
        ..cfg.embed.clone()
    };
    let init = ModelBundle::init(
        f,
        triggers.message_len(),
        &cfg.aux,
        hyper,
        &mut stream(seeds.aux_init, &[]),
    )?;
    embed_watermark(init, triggers).map_err(Error::from)
}

/// `mean ||f(x) - g(x)|| / mean ||f(x)||` over `inputs`.
pub fn fidelity_ratio(
    f: &MlpNetwork<f64>,
    g: &MlpNetwork<f64>,
    inputs: &[Vec<f64>],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(invalid("fidelity needs at least one input"));
    }
    let (mut diff, mut base) = (0.0, 0.0);
    for x in inputs {
        let a = f.predict(x)?;
        let b = g.predict(x)?;
        diff += a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        base += a.iter().map(|p| p * p).sum::<f64>().sqrt();
    }
    Ok(diff / base)
}

/// Linear-interpolation percentile, `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuspectSummary {
    pub id: String,
    pub kind: String,
    pub detection_rate: f64,
    pub mean_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair_id: String,
    pub kind: String,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub pairs: Vec<PairSummary>,
    pub dependent_mean_delta: Option<f64>,
    pub independent_mean: Option<f64>,
    pub independent_se: Option<f64>,
    pub independent_p95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n: usize,
    pub triggers: usize,
    pub tau: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub fidelity_ratio: f64,
    pub final_bit_accuracy: Option<f64>,
    pub suspects: Vec<SuspectSummary>,
    /// Diagnostic on hard distances.
    pub covariance: CovarianceSummary,
    /// Same diagnostic on soft distances.
    pub covariance_soft: CovarianceSummary,
    pub omega_size: usize,
    pub xi_size: usize,
    /// Detection rate of each omega model, in population order.
    pub omega_rates: Vec<f64>,
    pub xi_rates: Vec<f64>,
    pub p_hat: f64,
    pub q_hat: f64,
}

impl RunSummary {
    pub fn suspect(&self, id: &str) -> Option<&SuspectSummary> {
        self.suspects.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub bounds: BoundReport,
    pub manifest: RunManifest,
}

#[derive(Default)]
struct StageLog {
    records: Vec<StageRecord>,
}

impl StageLog {
    fn run<R>(&mut self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        log::info!("stage {name}");
        let out = f();
        self.records.push(StageRecord {
            name: name.to_string(),
            status: if out.is_ok() {
                StageStatus::Ok
            } else {
                StageStatus::Failed
            },
            seconds: t.elapsed().as_secs_f64(),
            error: out.as_ref().err().map(|e| e.to_string()),
        });
        out
    }

    fn finish(mut self) -> Vec<StageRecord> {
        for name in STAGES.iter().skip(self.records.len()) {
            self.records.push(StageRecord {
                name: name.to_string(),
                status: StageStatus::Skipped,
                seconds: 0.0,
                error: None,
            });
        }
        self.records
    }
}

struct Suspect {
    id: String,
    kind: String,
    batches: Vec<ExtractionBatch>,
}

fn backbone_spec(cfg: &ExperimentConfig) -> MlpSpec {
    MlpSpec::uniform(
        cfg.s,
        &cfg.backbone_hidden,
        cfg.k,
        Activation::Tanh,
        Activation::Identity,
    )
}

fn rhos(batches: &[ExtractionBatch]) -> Result<Vec<f64>> {
    batches.iter().map(mean_distance).collect()
}

/// Extraction for population models. Soft outputs are kept only for the
/// first `keep_soft` members, to save memory.
fn extract_population(
    members: &[PopulationMember<f64>],
    bundle: &ModelBundle<f64>,
    triggers: &TriggerSet,
    k: usize,
    seed: u64,
    keep_soft: usize,
) -> Result<Vec<Vec<ExtractionBatch>>> {
    members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut b = extract_all(&m.backbone, bundle, triggers, k, seed)?;
            if i >= keep_soft {
                b.iter_mut().for_each(|x| x.soft_bits = Vec::new());
            }
            Ok(b)
        })
        .collect()
}

type DeltaFn = fn(&ExtractionBatch, &ExtractionBatch) -> Result<Option<f64>>;

fn trigger_averaged_delta(
    f: &[ExtractionBatch],
    g: &[ExtractionBatch],
    delta: DeltaFn,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let deltas = f
        .iter()
        .zip(g)
        .map(|(a, b)| delta(a, b))
        .collect::<Result<Vec<_>>>()?;
    let known: Vec<f64> = deltas.iter().flatten().copied().collect();
    let mean = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
    Ok((deltas, mean))
}

fn covariance_summary(pairs: Vec<PairSummary>) -> CovarianceSummary {
    let dependent_mean_delta = pairs
        .iter()
        .find(|p| p.kind == "dependent")
        .map(|p| p.mean_delta);
    let ind: Vec<f64> = pairs
        .iter()
        .filter(|p| p.kind == "independent")
        .map(|p| p.mean_delta)
        .collect();
    let independent_mean = (!ind.is_empty()).then(|| ind.iter().sum::<f64>() / ind.len() as f64);
    let independent_se = crate::stats::sample_variance(&ind).map(|v| (v / ind.len() as f64).sqrt());
    CovarianceSummary {
        independent_p95: percentile(&ind, 0.95),
        pairs,
        dependent_mean_delta,
        independent_mean,
        independent_se,
    }
}

/// Runs every stage, writing outputs under `out`. A failing stage is
/// recorded in the manifest, later stages are marked skipped and the error
/// is returned after the manifest is written.
pub fn run_pipeline(config: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunOutcome> {
    config.validate()?;
    let dir = out.as_ref().to_path_buf();
    fs::create_dir_all(&dir)?;
    let snapshot = ExperimentConfig {
        out: None,
        ..config.clone()
    };
    let mut stages = StageLog::default();
    let result = run_stages(&snapshot, &dir, &mut stages);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(&snapshot)?,
        stages: stages.finish(),
        files: collect_files(&dir)?,
    };
    manifest.write(&dir)?;
    let (summary, bounds) = result?;
    Ok(RunOutcome {
        dir,
        summary,
        bounds,
        manifest,
    })
}

fn run_stages(
    cfg: &ExperimentConfig,
    dir: &Path,
    st: &mut StageLog,
) -> Result<(RunSummary, BoundReport)> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let tau = match cfg.tau {
        Some(t) => t,
        None => select_threshold(0.5, cfg.n, cfg.epsilon_fpr)?.ok_or_else(|| {
            invalid(format!(
                "no threshold meets epsilon_fpr = {}",
                cfg.epsilon_fpr
            ))
        })?,
    };

    let triggers = st.run("data", || {
        fs::write(dir.join("config.ini"), cfg.to_ini())?;
        let set = build_triggers(cfg)?;
        set.save(dir.join("triggers.rmts"))?;
        Ok(set)
    })?;

    let f = st.run("pretrain", || pretrain_backbone(cfg))?;

    let (bundle, fidelity, bit_accuracy) = st.run("embed", || {
        let (bundle, log) = train_bundle(cfg, f, &triggers)?;
        fs::write(dir.join("training_log.csv"), log.to_csv())?;
        save_bundle(&bundle, dir.join("bundle"))?;
        let heldout = gen_synthetic_images(cfg.heldout, cfg.s, seeds.heldout)?;
        let fid = fidelity_ratio(&bundle.frozen_f, &bundle.watermarked_f, &heldout)?;
        Ok((bundle, fid, log.last().map(|e| e.bit_accuracy)))
    })?;

    let attacked = st.run("attacks", || {
        cfg.attacks
            .iter()
            .map(|a| {
                Ok((
                    a.name.clone(),
                    a.spec.kind.as_str().to_string(),
                    apply_attack(&bundle.watermarked_f, &a.spec)?,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let (omega, xi) = st.run("population", || {
        let omega = sample_model_population(
            &bundle,
            PopulationKind::Omega,
            cfg.m,
            seeds.omega,
            &cfg.population,
        )?;
        let xi = sample_model_population(
            &bundle,
            PopulationKind::Xi,
            cfg.m,
            seeds.xi,
            &cfg.population,
        )?;
        if omega.is_empty() {
            return Err(invalid("every omega model was dropped as non-functional"));
        }
        if cfg.save_population {
            save_population(&omega, PopulationKind::Omega, dir.join("population"))?;
            save_population(&xi, PopulationKind::Xi, dir.join("population"))?;
        }
        Ok((omega, xi))
    })?;

    let k = cfg.k_verify;
    let (suspects, omega_batches, xi_batches) = st.run("verify", || {
        let xi_batches = extract_population(
            &xi,
            &bundle,
            &triggers,
            k,
            seeds.verify,
            cfg.covariance_pairs,
        )?;
        let omega_batches = extract_population(&omega, &bundle, &triggers, k, seeds.verify, 0)?;
        let reference = extract_all(&bundle.watermarked_f, &bundle, &triggers, k, seeds.verify)?;
        let mut suspects = vec![Suspect {
            id: "watermarked".into(),
            kind: "watermarked".into(),
            batches: reference,
        }];
        for (name, kind, net) in &attacked {
            suspects.push(Suspect {
                id: name.clone(),
                kind: kind.clone(),
                batches: extract_all(net, &bundle, &triggers, k, seeds.verify)?,
            });
        }
        for (i, b) in xi_batches.iter().take(cfg.independents).enumerate() {
            suspects.push(Suspect {
                id: format!("independent{i}"),
                kind: "independent".into(),
                batches: b.clone(),
            });
        }
        fs::create_dir_all(dir.join("reports"))?;
        let mut rows: Vec<SweepRow> = Vec::new();
        for s in &suspects {
            let reference = (s.id != "watermarked").then(|| &suspects[0].batches[..]);
            let report =
                VerificationReport::from_batches(&s.id, &s.batches, tau, seeds.verify, reference)?;
            fs::write(
                dir.join("reports").join(format!("{}.json", s.id)),
                report.to_json()?,
            )?;
            rows.extend(detection_rate_sweep(&s.id, &s.kind, &report.rho, cfg.n)?);
        }
        fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
        Ok((suspects, omega_batches, xi_batches))
    })?;

    let (covariance, covariance_soft) = st.run("covariance", || {
        let wm = &suspects[0].batches;
        let mut pairs: Vec<(String, &str, &[ExtractionBatch])> = Vec::new();
        if let Some(dep) = suspects.iter().find(|s| s.id == cfg.covariance_attack) {
            pairs.push((format!("watermarked~{}", dep.id), "dependent", &dep.batches));
        }
        for (i, b) in xi_batches.iter().take(cfg.covariance_pairs).enumerate() {
            pairs.push((format!("watermarked~independent{i}"), "independent", b));
        }
        let statistics: [(&str, DeltaFn); 2] = [
            ("covariance.csv", covariance_delta),
            ("covariance_soft.csv", soft_covariance_delta),
        ];
        let mut out = Vec::new();
        for (file, delta) in statistics {
            let mut csv = String::from("pair_id,kind,trigger_id,delta\n");
            let mut summaries = Vec::new();
            for (pair_id, kind, batches) in &pairs {
                let (deltas, mean) = trigger_averaged_delta(wm, batches, delta)?;
                for (i, d) in deltas.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{pair_id},{kind},{i},{}",
                        d.map_or(String::from("NA"), |v| v.to_string())
                    );
                }
                if let Some(mean_delta) = mean {
                    summaries.push(PairSummary {
                        pair_id: pair_id.clone(),
                        kind: kind.to_string(),
                        mean_delta,
                    });
                }
            }
            fs::write(dir.join(file), csv)?;
            out.push(covariance_summary(summaries));
        }
        let soft = out.pop().expect("two statistics");
        Ok((out.pop().expect("two statistics"), soft))
    })?;

    let model_rates = |pop: &[Vec<ExtractionBatch>]| -> Result<Vec<f64>> {
        pop.iter().map(|b| detection_rate(&rhos(b)?, tau)).collect()
    };
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let (bounds, omega_rates, xi_rates) = st.run("bounds", || {
        let omega_est = estimate_bit_collisions(&omega_batches, cfg.alpha, cfg.pooling)?;
        let xi_est = estimate_bit_collisions(&xi_batches, cfg.alpha, cfg.pooling)?;
        let omega_rates = model_rates(&omega_batches)?;
        let xi_rates = model_rates(&xi_batches)?;
        let (p_hat, q_hat) = (mean(&omega_rates), mean(&xi_rates));
        let settings = BoundSettings {
            alpha: cfg.alpha,
            delta: cfg.delta,
            n: cfg.n,
            tau,
            r_bar: cfg.r_bar,
            r_under: cfg.r_under,
            bridge: cfg.bridge,
        };
        let report = BoundReport::build(&settings, &omega_est, &xi_est, p_hat, q_hat)?;
        fs::write(dir.join("bounds.json"), report.to_json()?)?;
        Ok((report, omega_rates, xi_rates))
    })?;

    let summary = st.run("report", || {
        let suspects = suspects
            .iter()
            .map(|s| {
                let r = rhos(&s.batches)?;
                Ok(SuspectSummary {
                    id: s.id.clone(),
                    kind: s.kind.clone(),
                    detection_rate: detection_rate(&r, tau)?,
                    mean_rho: r.iter().sum::<f64>() / r.len() as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = RunSummary {
            n: cfg.n,
            triggers: cfg.triggers,
            tau,
            k,
            fidelity_ratio: fidelity,
            final_bit_accuracy: bit_accuracy,
            suspects,
            covariance,
            covariance_soft,
            omega_size: omega.len(),
            xi_size: xi.len(),
            p_hat: mean(&omega_rates),
            q_hat: mean(&xi_rates),
            omega_rates,
            xi_rates,
        };
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(summary)
    })?;
    Ok((summary, bounds))
}

/// Caps the global thread pool from `RANDMARK_THREADS`, if set. Returns the
/// requested count.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var("RANDMARK_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        invalid(format!(
            "RANDMARK_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(Some(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let xs = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&xs, 0.0), Some(1.0));
        assert_eq!(percentile(&xs, 0.5), Some(3.0));
        assert_eq!(percentile(&xs, 0.95), Some(4.8));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn fidelity_of_identical_networks_is_zero() {
        let spec = MlpSpec::uniform(9, &[5], 3, Activation::Tanh, Activation::Identity);
        let f = MlpNetwork::<f64>::random(&spec, &mut stream(1, &[]));
        let x = gen_synthetic_images(4, 9, 2).unwrap();
        assert_eq!(fidelity_ratio(&f, &f, &x).unwrap(), 0.0);
    }
}
